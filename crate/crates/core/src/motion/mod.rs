//! Motion sequences, their file formats and foot-contact derivation.

mod manifest;
pub mod synth;

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};

pub use manifest::{grade_value, DatasetManifest, LimbSide, ManifestEntry, SampleMeta, Split, Technique, MAX_GRADE_INDEX};
pub use synth::{generate_synthetic_dataset, SynthConfig, SynthDataset};

pub type Point = Vector3<f64>;

const SEQ_MAGIC: &[u8; 4] = b"MDAE";
const SEQ_VERSION: u32 = 1;

/// Default thresholds for deriving contacts when none are recorded.
pub const DEFAULT_CONTACT_HEIGHT: f64 = 0.05;
pub const DEFAULT_CONTACT_SPEED: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    #[default]
    #[serde(alias = "meters")]
    M,
    #[serde(alias = "millimeters")]
    Mm,
}

impl Units {
    pub fn to_meters(self) -> f64 {
        match self {
            Units::M => 1.0,
            Units::Mm => 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Binary,
}

impl Format {
    /// `.csv` is CSV, anything else the binary container.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Binary,
        }
    }
}

/// Per-frame binary contact flags for a set of foot markers.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactMask {
    pub markers: Vec<String>,
    /// `flags[frame][i]` is the contact state of `markers[i]`.
    pub flags: Vec<Vec<bool>>,
}

impl ContactMask {
    pub fn frames(&self) -> usize {
        self.flags.len()
    }
}

/// Marker trajectories in meters, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    markers: Vec<String>,
    coords: Vec<Point>,
    rate: f64,
    contacts: Option<ContactMask>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Finding {
    pub frame: Option<usize>,
    pub marker: Option<String>,
    pub issue: String,
}

/// Violated invariants of a sequence. Empty means valid.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }
}

impl MotionSequence {
    /// Builds and validates a sequence from per-frame marker positions.
    pub fn new(markers: Vec<String>, frames: Vec<Vec<Point>>, rate: f64) -> Result<Self> {
        for (i, f) in frames.iter().enumerate() {
            if f.len() != markers.len() {
                return Err(Error::InconsistentMarkers {
                    frame: i,
                    expected: markers.len(),
                    found: f.len(),
                });
            }
        }
        let seq = Self::from_flat(markers, frames.into_iter().flatten().collect(), rate, None);
        seq.check()?;
        Ok(seq)
    }

    /// Assembles a sequence without validation, e.g. to run
    /// [`validate_sequence`] on suspect data.
    pub fn from_flat(
        markers: Vec<String>,
        coords: Vec<Point>,
        rate: f64,
        contacts: Option<ContactMask>,
    ) -> Self {
        MotionSequence {
            markers,
            coords,
            rate,
            contacts,
        }
    }

    pub fn with_contacts(mut self, contacts: ContactMask) -> Result<Self> {
        if contacts.frames() != self.frames() {
            return Err(Error::InvalidSequence(format!(
                "contact mask has {} frames, sequence has {}",
                contacts.frames(),
                self.frames()
            )));
        }
        for name in &contacts.markers {
            self.marker_index(name)?;
        }
        self.contacts = Some(contacts);
        Ok(self)
    }

    pub fn without_contacts(mut self) -> Self {
        self.contacts = None;
        self
    }

    pub fn frames(&self) -> usize {
        if self.markers.is_empty() {
            0
        } else {
            self.coords.len() / self.markers.len()
        }
    }

    pub fn markers(&self) -> &[String] {
        &self.markers
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn contacts(&self) -> Option<&ContactMask> {
        self.contacts.as_ref()
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn frame(&self, i: usize) -> &[Point] {
        let m = self.markers.len();
        &self.coords[i * m..(i + 1) * m]
    }

    pub fn position(&self, frame: usize, marker: usize) -> Point {
        self.coords[frame * self.markers.len() + marker]
    }

    pub fn marker_index(&self, name: &str) -> Result<usize> {
        self.markers
            .iter()
            .position(|m| m == name)
            .ok_or_else(|| Error::UnknownMarker(name.to_string()))
    }

    /// Trajectory of one marker.
    pub fn trajectory(&self, marker: usize) -> impl Iterator<Item = Point> + '_ {
        (0..self.frames()).map(move |f| self.position(f, marker))
    }

    /// Applies `f` to every coordinate; metadata is kept.
    pub fn map_points(&self, mut f: impl FnMut(Point) -> Point) -> Self {
        MotionSequence {
            markers: self.markers.clone(),
            coords: self.coords.iter().map(|&p| f(p)).collect(),
            rate: self.rate,
            contacts: self.contacts.clone(),
        }
    }

    /// Frames `start..end` (end exclusive).
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames() {
            return Err(Error::InvalidArgument(format!(
                "frame range {start}..{end} outside 0..{}",
                self.frames()
            )));
        }
        let m = self.markers.len();
        let contacts = self.contacts.as_ref().map(|c| ContactMask {
            markers: c.markers.clone(),
            flags: c.flags[start..end].to_vec(),
        });
        Ok(MotionSequence {
            markers: self.markers.clone(),
            coords: self.coords[start * m..end * m].to_vec(),
            rate: self.rate,
            contacts,
        })
    }

    fn check(&self) -> Result<()> {
        let report = validate_sequence(self);
        match report.findings.into_iter().next() {
            None => Ok(()),
            Some(Finding {
                frame: Some(frame),
                marker: Some(marker),
                ..
            }) => Err(Error::NonFinite { frame, marker }),
            Some(f) => Err(Error::InvalidSequence(f.issue)),
        }
    }
}

/// Lists every violated invariant of `seq` with its location.
pub fn validate_sequence(seq: &MotionSequence) -> ValidationReport {
    let mut findings = Vec::new();
    if !(seq.rate > 0.0) || !seq.rate.is_finite() {
        findings.push(Finding {
            frame: None,
            marker: None,
            issue: format!("sampling rate must be positive, got {}", seq.rate),
        });
    }
    if seq.markers.is_empty() {
        findings.push(Finding {
            frame: None,
            marker: None,
            issue: "no markers".into(),
        });
        return ValidationReport { findings };
    }
    if !seq.coords.len().is_multiple_of(seq.markers.len()) {
        findings.push(Finding {
            frame: None,
            marker: None,
            issue: format!(
                "{} positions do not divide into frames of {} markers",
                seq.coords.len(),
                seq.markers.len()
            ),
        });
    }
    let mut seen = std::collections::HashSet::new();
    for m in &seq.markers {
        if !seen.insert(m) {
            findings.push(Finding {
                frame: None,
                marker: Some(m.clone()),
                issue: "duplicate marker name".into(),
            });
        }
    }
    let m = seq.markers.len();
    for (i, p) in seq.coords.iter().enumerate() {
        if !p.iter().all(|v| v.is_finite()) {
            findings.push(Finding {
                frame: Some(i / m),
                marker: Some(seq.markers[i % m].clone()),
                issue: "non-finite coordinate".into(),
            });
        }
    }
    if let Some(c) = &seq.contacts {
        if c.flags.len() != seq.frames() {
            findings.push(Finding {
                frame: None,
                marker: None,
                issue: format!(
                    "contact mask has {} frames, sequence has {}",
                    c.flags.len(),
                    seq.frames()
                ),
            });
        }
        for name in &c.markers {
            if !seq.markers.contains(name) {
                findings.push(Finding {
                    frame: None,
                    marker: Some(name.clone()),
                    issue: "contact marker not in sequence".into(),
                });
            }
        }
    }
    ValidationReport { findings }
}

/// Reads a sequence. CSV carries neither rate nor units, so they are
/// supplied here (binary files ignore both).
pub fn load_sequence(path: &Path, format: Format, rate: f64, units: Units) -> Result<MotionSequence> {
    match format {
        Format::Csv => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_csv(&text, rate, units)
        }
        Format::Binary => decode_binary(&read_file(path)?),
    }
}

pub fn save_sequence(seq: &MotionSequence, path: &Path, format: Format) -> Result<()> {
    match format {
        Format::Csv => std::fs::write(path, to_csv(seq)).map_err(|e| Error::io(path, e)),
        Format::Binary => encode_binary(seq).write_to(path),
    }
}

pub fn to_csv(seq: &MotionSequence) -> String {
    let mut out = String::from("frame,marker,x,y,z\n");
    for f in 0..seq.frames() {
        for (i, name) in seq.markers.iter().enumerate() {
            let p = seq.position(f, i);
            let _ = writeln!(out, "{f},{name},{},{},{}", p.x, p.y, p.z);
        }
    }
    out
}

pub fn parse_csv(text: &str, rate: f64, units: Units) -> Result<MotionSequence> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != ["frame", "marker", "x", "y", "z"] {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `frame,marker,x,y,z`, got `{header}`"),
        });
    }
    let scale = units.to_meters();
    let mut markers: Vec<String> = Vec::new();
    let mut frames: Vec<Vec<(String, Point)>> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let frame: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad frame index `{}`", fields[0]),
        })?;
        let mut xyz = [0.0; 3];
        for k in 0..3 {
            xyz[k] = fields[2 + k].parse::<f64>().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad coordinate `{}`", fields[2 + k]),
            })?;
        }
        if frame == frames.len() {
            frames.push(Vec::new());
        } else if frame + 1 != frames.len() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("frame {frame} out of order (expected {} or {})", frames.len().saturating_sub(1), frames.len()),
            });
        }
        let name = fields[1].to_string();
        if frame == 0 {
            markers.push(name.clone());
        }
        let p = Point::new(xyz[0], xyz[1], xyz[2]) * scale;
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { frame, marker: name });
        }
        frames.last_mut().unwrap().push((name, p));
    }
    if frames.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    let mut coords = Vec::with_capacity(frames.len() * markers.len());
    for (f, rows) in frames.into_iter().enumerate() {
        if rows.len() != markers.len() {
            return Err(Error::InconsistentMarkers {
                frame: f,
                expected: markers.len(),
                found: rows.len(),
            });
        }
        for ((name, p), expected) in rows.into_iter().zip(&markers) {
            if &name != expected {
                return Err(Error::InvalidSequence(format!(
                    "frame {f}: marker `{name}` where `{expected}` was expected"
                )));
            }
            coords.push(p);
        }
    }
    let seq = MotionSequence::from_flat(markers, coords, rate, None);
    seq.check()?;
    Ok(seq)
}

fn encode_binary(seq: &MotionSequence) -> Writer {
    let mut w = Writer::new(SEQ_MAGIC, SEQ_VERSION);
    w.u64(seq.frames() as u64);
    w.u64(seq.markers.len() as u64);
    w.f64(seq.rate);
    for m in &seq.markers {
        w.str(m);
    }
    for p in &seq.coords {
        w.f64s(p.as_slice());
    }
    match &seq.contacts {
        None => w.u8(0),
        Some(c) => {
            w.u8(1);
            w.u32(c.markers.len() as u32);
            for m in &c.markers {
                w.str(m);
            }
            for row in &c.flags {
                for &b in row {
                    w.u8(b as u8);
                }
            }
        }
    }
    w
}

pub fn decode_binary(buf: &[u8]) -> Result<MotionSequence> {
    let mut r = Reader::open(buf, SEQ_MAGIC, SEQ_VERSION)?;
    let frames = r.len()?;
    let n_markers = r.len()?;
    let rate = r.f64()?;
    let markers = (0..n_markers).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let flat = r.f64s(frames.checked_mul(n_markers).and_then(|v| v.checked_mul(3)).ok_or_else(|| Error::Corrupt("size overflow".into()))?)?;
    let coords = flat.chunks_exact(3).map(Point::from_column_slice).collect();
    let contacts = match r.u8()? {
        0 => None,
        1 => {
            let k = r.u32()? as usize;
            let names = (0..k).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
            let mut flags = Vec::with_capacity(frames);
            for _ in 0..frames {
                flags.push((0..k).map(|_| r.u8().map(|b| b != 0)).collect::<Result<Vec<_>>>()?);
            }
            Some(ContactMask { markers: names, flags })
        }
        other => return Err(Error::Corrupt(format!("bad contact flag {other}"))),
    };
    r.finish()?;
    let seq = MotionSequence::from_flat(markers, coords, rate, contacts);
    seq.check()?;
    Ok(seq)
}

/// Flags frames where a foot marker is low and slow.
///
/// Speed at frame `i` is the backward difference to frame `i - 1` (forward
/// difference at frame 0) scaled by the sampling rate.
pub fn derive_foot_contacts(
    seq: &MotionSequence,
    foot_markers: &[String],
    height_thresh: f64,
    speed_thresh: f64,
) -> Result<ContactMask> {
    let idx = foot_markers
        .iter()
        .map(|n| seq.marker_index(n))
        .collect::<Result<Vec<_>>>()?;
    let n = seq.frames();
    let flags = (0..n)
        .map(|f| {
            idx.iter()
                .map(|&m| {
                    let p = seq.position(f, m);
                    let speed = match (f, n) {
                        (_, 1) => 0.0,
                        (0, _) => (seq.position(1, m) - p).norm() * seq.rate,
                        _ => (p - seq.position(f - 1, m)).norm() * seq.rate,
                    };
                    p.z < height_thresh && speed < speed_thresh
                })
                .collect()
        })
        .collect();
    Ok(ContactMask {
        markers: foot_markers.to_vec(),
        flags,
    })
}

/// Recorded contacts for `foot_markers` when present, otherwise derived
/// with the default thresholds.
pub fn contacts_or_derived(seq: &MotionSequence, foot_markers: &[String]) -> Result<ContactMask> {
    if let Some(c) = seq.contacts() {
        if foot_markers.iter().all(|m| c.markers.contains(m)) {
            let cols: Vec<usize> = foot_markers
                .iter()
                .map(|m| c.markers.iter().position(|n| n == m).unwrap())
                .collect();
            return Ok(ContactMask {
                markers: foot_markers.to_vec(),
                flags: c.flags.iter().map(|row| cols.iter().map(|&i| row[i]).collect()).collect(),
            });
        }
    }
    derive_foot_contacts(seq, foot_markers, DEFAULT_CONTACT_HEIGHT, DEFAULT_CONTACT_SPEED)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn csv_two_frames_three_markers() {
        let text = "frame,marker,x,y,z\n0,A,0,0,0\n0,B,1,0,0\n0,C,0,1,0\n1,A,0,0,1\n1,B,1,0,1\n1,C,0,1,1\n";
        let seq = parse_csv(text, 25.0, Units::M).unwrap();
        assert_eq!(seq.frames(), 2);
        assert_eq!(seq.markers(), &names(&["A", "B", "C"])[..]);
        assert_eq!(seq.position(1, 2), Point::new(0.0, 1.0, 1.0));
    }

    #[test]
    fn csv_millimeters_are_converted() {
        let text = "frame,marker,x,y,z\n0,A,1000,-500,250\n";
        let seq = parse_csv(text, 25.0, Units::Mm).unwrap();
        assert_eq!(seq.position(0, 0), Point::new(1.0, -0.5, 0.25));
    }

    #[test]
    fn csv_nan_names_frame_and_marker() {
        let text = "frame,marker,x,y,z\n0,A,0,0,0\n0,B,1,0,0\n1,A,0,0,0\n1,B,NaN,0,0\n";
        match parse_csv(text, 25.0, Units::M) {
            Err(Error::NonFinite { frame, marker }) => {
                assert_eq!(frame, 1);
                assert_eq!(marker, "B");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_inconsistent_marker_count() {
        let text = "frame,marker,x,y,z\n0,A,0,0,0\n0,B,1,0,0\n1,A,0,0,0\n";
        assert!(matches!(
            parse_csv(text, 25.0, Units::M),
            Err(Error::InconsistentMarkers { frame: 1, expected: 2, found: 1 })
        ));
    }

    #[test]
    fn csv_parse_error_reports_line() {
        let text = "frame,marker,x,y,z\n0,A,0,0,0\n0,B,one,0,0\n";
        assert!(matches!(parse_csv(text, 25.0, Units::M), Err(Error::Parse { line: 3, .. })));
    }

    fn sample() -> MotionSequence {
        let frames = (0..4)
            .map(|f| {
                vec![
                    Point::new(0.1 * f as f64, 0.0, 1.0 / 3.0),
                    Point::new(std::f64::consts::PI, -1e-17, 2.0),
                ]
            })
            .collect();
        MotionSequence::new(names(&["A", "B"]), frames, 25.0).unwrap()
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.mdae");
        let seq = sample();
        let contacts = derive_foot_contacts(&seq, &names(&["A"]), 0.5, 10.0).unwrap();
        let seq = seq.with_contacts(contacts).unwrap();
        save_sequence(&seq, &path, Format::Binary).unwrap();
        let back = load_sequence(&path, Format::Binary, 0.0, Units::M).unwrap();
        assert_eq!(back, seq);
    }

    #[test]
    fn csv_round_trip_within_tolerance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let seq = sample();
        save_sequence(&seq, &path, Format::Csv).unwrap();
        let back = load_sequence(&path, Format::Csv, 25.0, Units::M).unwrap();
        for (a, b) in seq.coords().iter().zip(back.coords()) {
            assert!((a - b).norm() <= 1e-9);
        }
    }

    #[test]
    fn save_to_unwritable_path_fails() {
        let err = save_sequence(&sample(), Path::new("/nonexistent-dir/x/s.mdae"), Format::Binary);
        assert!(matches!(err, Err(Error::Io { .. })));
    }

    #[test]
    fn truncated_binary_is_corrupt() {
        let bytes = encode_binary(&sample()).buf;
        assert!(matches!(decode_binary(&bytes[..bytes.len() - 5]), Err(Error::Corrupt(_))));
    }

    #[test]
    fn validate_reports_inf_and_rate() {
        assert!(validate_sequence(&sample()).is_empty());
        let mut coords = sample().coords().to_vec();
        coords[3] = Point::new(f64::INFINITY, 0.0, 0.0);
        let bad = MotionSequence::from_flat(names(&["A", "B"]), coords, 25.0, None);
        let report = validate_sequence(&bad);
        assert_eq!(report.findings.len(), 1);
        assert_eq!(report.findings[0].frame, Some(1));
        assert_eq!(report.findings[0].marker.as_deref(), Some("B"));

        let zero_rate = MotionSequence::from_flat(names(&["A", "B"]), sample().coords().to_vec(), 0.0, None);
        let report = validate_sequence(&zero_rate);
        assert_eq!(report.findings.len(), 1);
        assert!(report.findings[0].issue.contains("rate"));
    }

    fn foot_seq(heights: impl Fn(usize) -> Point, n: usize) -> MotionSequence {
        let frames = (0..n).map(|f| vec![heights(f), Point::new(0.0, 0.0, 1.0)]).collect();
        MotionSequence::new(names(&["FOOT", "HEAD"]), frames, 25.0).unwrap()
    }

    #[test]
    fn contacts_fixed_and_raised_feet() {
        let on_ground = foot_seq(|_| Point::new(0.1, 0.2, 0.0), 10);
        let mask = derive_foot_contacts(&on_ground, &names(&["FOOT"]), 0.05, 0.1).unwrap();
        assert!(mask.flags.iter().all(|r| r[0]));
        let raised = foot_seq(|_| Point::new(0.1, 0.2, 1.0), 10);
        let mask = derive_foot_contacts(&raised, &names(&["FOOT"]), 0.05, 0.1).unwrap();
        assert!(mask.flags.iter().all(|r| !r[0]));
    }

    #[test]
    fn contacts_step_sequence_matches_oracle() {
        // Planted for frames 0..10, then lifting along a parabola.
        let traj = |f: usize| {
            if f < 10 {
                Point::new(0.0, 0.0, 0.0)
            } else {
                let s = (f - 9) as f64;
                Point::new(0.0, -0.05 * s, 0.1 * s - 0.002 * s * s)
            }
        };
        let seq = foot_seq(traj, 20);
        let mask = derive_foot_contacts(&seq, &names(&["FOOT"]), 0.05, 0.1).unwrap();
        // Independent per-frame predicate evaluation.
        let expected: Vec<bool> = (0..20)
            .map(|f| {
                let p = traj(f);
                let q = if f == 0 { traj(1) } else { traj(f - 1) };
                let speed = (p - q).norm() * 25.0;
                p.z < 0.05 && speed < 0.1
            })
            .collect();
        let got: Vec<bool> = mask.flags.iter().map(|r| r[0]).collect();
        assert_eq!(got, expected);
        assert!(got[..10].iter().all(|&b| b));
        assert!(got[10..].iter().all(|&b| !b));
    }

    #[test]
    fn contacts_are_idempotent_and_local() {
        let seq = foot_seq(|f| Point::new(0.0, 0.01 * f as f64, 0.0), 8);
        let a = derive_foot_contacts(&seq, &names(&["FOOT"]), 0.05, 0.3).unwrap();
        let b = derive_foot_contacts(&seq, &names(&["FOOT"]), 0.05, 0.3).unwrap();
        assert_eq!(a, b);
        // Moving a non-foot marker does not change the mask.
        let moved = MotionSequence::new(
            names(&["FOOT", "HEAD"]),
            (0..8)
                .map(|f| vec![seq.position(f, 0), Point::new(f as f64, 3.0, 1.0)])
                .collect(),
            25.0,
        )
        .unwrap();
        assert_eq!(derive_foot_contacts(&moved, &names(&["FOOT"]), 0.05, 0.3).unwrap(), a);
        assert!(matches!(
            derive_foot_contacts(&seq, &names(&["TOE"]), 0.05, 0.1),
            Err(Error::UnknownMarker(_))
        ));
    }
}
