//! Dataset cleaning and spatial normalization of raw recordings.

use nalgebra::{Rotation3, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::motion::{ContactMask, MotionSequence, Point};

pub const DEFAULT_Z_THRESH: f64 = 3.0;
/// Mean marker speed (m/s) below which leading/trailing frames count as static.
pub const STATIC_SPEED: f64 = 0.05;

/// Keeps every `rate / target`-th frame starting at frame 0.
pub fn downsample(seq: &MotionSequence, target_rate: f64) -> Result<MotionSequence> {
    if !(target_rate > 0.0) {
        return Err(Error::InvalidArgument(format!("target rate {target_rate} must be positive")));
    }
    let ratio = seq.rate() / target_rate;
    let factor = ratio.round();
    if factor < 1.0 || (ratio - factor).abs() > 1e-9 * ratio {
        return Err(Error::InvalidArgument(format!(
            "{} Hz is not an integer multiple of {target_rate} Hz",
            seq.rate()
        )));
    }
    let step = factor as usize;
    let kept: Vec<usize> = (0..seq.frames()).step_by(step).collect();
    let coords = kept.iter().flat_map(|&f| seq.frame(f).iter().copied()).collect();
    let out = MotionSequence::from_flat(seq.markers().to_vec(), coords, target_rate, None);
    Ok(match seq.contacts() {
        Some(c) => out.with_contacts(ContactMask {
            markers: c.markers.clone(),
            flags: kept.iter().map(|&f| c.flags[f].clone()).collect(),
        })?,
        None => out,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Duration,
    Displacement,
    HeadSpeed,
}

#[derive(Clone, Debug, Serialize)]
pub struct SequenceStats {
    pub index: usize,
    /// Seconds.
    pub duration: f64,
    /// Summed frame-to-frame marker displacement (m).
    pub displacement: f64,
    /// Peak head-marker speed (m/s).
    pub head_speed: Option<f64>,
    pub z_duration: f64,
    pub z_displacement: f64,
    pub z_head_speed: Option<f64>,
    pub flags: Vec<Statistic>,
    /// Leading and trailing frames whose mean marker speed is below [`STATIC_SPEED`].
    pub static_prefix: usize,
    pub static_suffix: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct OutlierReport {
    pub z_thresh: f64,
    pub sequences: Vec<SequenceStats>,
}

impl OutlierReport {
    pub fn flagged(&self) -> impl Iterator<Item = &SequenceStats> {
        self.sequences.iter().filter(|s| !s.flags.is_empty())
    }
}

/// Population z-scores; zero spread gives zero scores.
fn z_scores(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    values
        .iter()
        .map(|v| if std > 1e-12 * mean.abs().max(1.0) { (v - mean) / std } else { 0.0 })
        .collect()
}

fn frame_speeds(seq: &MotionSequence) -> Vec<f64> {
    (1..seq.frames())
        .map(|f| {
            let (a, b) = (seq.frame(f - 1), seq.frame(f));
            a.iter().zip(b).map(|(p, q)| (q - p).norm()).sum::<f64>() / a.len() as f64 * seq.rate()
        })
        .collect()
}

/// Flags recordings whose duration, activity or head movement is atypical.
pub fn detect_outliers(dataset: &[MotionSequence], z_thresh: f64, head_marker: Option<&str>) -> Result<OutlierReport> {
    if dataset.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "outlier detection needs at least 3 sequences, got {}",
            dataset.len()
        )));
    }
    let durations: Vec<f64> = dataset.iter().map(|s| s.frames() as f64 / s.rate()).collect();
    let displacements: Vec<f64> = dataset
        .iter()
        .map(|s| frame_speeds(s).iter().sum::<f64>() * s.markers().len() as f64 / s.rate())
        .collect();
    let head_speeds = head_marker
        .map(|name| {
            dataset
                .iter()
                .map(|s| {
                    let m = s.marker_index(name)?;
                    let pts: Vec<Point> = s.trajectory(m).collect();
                    Ok(pts
                        .windows(2)
                        .map(|w| (w[1] - w[0]).norm() * s.rate())
                        .fold(0.0, f64::max))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .transpose()?;
    let zd = z_scores(&durations);
    let zx = z_scores(&displacements);
    let zh = head_speeds.as_deref().map(z_scores);
    let sequences = dataset
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            let mut flags = Vec::new();
            if zd[i].abs() > z_thresh {
                flags.push(Statistic::Duration);
            }
            if zx[i].abs() > z_thresh {
                flags.push(Statistic::Displacement);
            }
            let z_head = zh.as_ref().map(|z| z[i]);
            if z_head.is_some_and(|z| z.abs() > z_thresh) {
                flags.push(Statistic::HeadSpeed);
            }
            let speeds = frame_speeds(seq);
            let static_prefix = speeds.iter().take_while(|&&v| v < STATIC_SPEED).count();
            let static_suffix = if static_prefix == speeds.len() {
                0
            } else {
                speeds.iter().rev().take_while(|&&v| v < STATIC_SPEED).count()
            };
            SequenceStats {
                index: i,
                duration: durations[i],
                displacement: displacements[i],
                head_speed: head_speeds.as_ref().map(|h| h[i]),
                z_duration: zd[i],
                z_displacement: zx[i],
                z_head_speed: z_head,
                flags,
                static_prefix,
                static_suffix,
            }
        })
        .collect();
    Ok(OutlierReport { z_thresh, sequences })
}

/// Translates every frame so the root starts above the origin; heights are kept.
pub fn center_to_origin(seq: &MotionSequence, root_marker: &str) -> Result<MotionSequence> {
    let m = seq.marker_index(root_marker)?;
    let p = seq.position(0, m);
    let shift = Vector3::new(-p.x, -p.y, 0.0);
    Ok(seq.map_points(|q| q + shift))
}

/// Horizontal normal of the left→right marker vector at frame 0.
pub fn facing_normal(seq: &MotionSequence, left: &str, right: &str) -> Result<Vector3<f64>> {
    let l = seq.position(0, seq.marker_index(left)?);
    let r = seq.position(0, seq.marker_index(right)?);
    let across = Vector3::new(r.x - l.x, r.y - l.y, 0.0);
    let n = across.norm();
    if n < 1e-12 {
        return Err(Error::Degenerate(format!(
            "facing markers `{left}` and `{right}` coincide horizontally in frame 0"
        )));
    }
    Ok(Vector3::z().cross(&(across / n)))
}

/// Rotates about the vertical axis so the body initially faces −y.
pub fn rotate_to_facing(seq: &MotionSequence, left: &str, right: &str) -> Result<MotionSequence> {
    let n = facing_normal(seq, left, right)?;
    let angle = (-1.0f64).atan2(0.0) - n.y.atan2(n.x);
    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), angle);
    Ok(seq.map_points(|p| rot * p))
}

/// Reflects across the x = 0 plane, then swaps each left/right name pair.
pub fn mirror_left_to_right(seq: &MotionSequence, pairs: &[(String, String)]) -> Result<MotionSequence> {
    let mut perm: Vec<usize> = (0..seq.markers().len()).collect();
    for (l, r) in pairs {
        let (i, j) = (seq.marker_index(l)?, seq.marker_index(r)?);
        perm.swap(i, j);
    }
    let mirrored = seq.map_points(|p| Point::new(-p.x, p.y, p.z));
    let coords = (0..seq.frames())
        .flat_map(|f| {
            let frame = mirrored.frame(f);
            perm.iter().map(|&k| frame[k]).collect::<Vec<_>>()
        })
        .collect();
    let out = MotionSequence::from_flat(seq.markers().to_vec(), coords, seq.rate(), None);
    Ok(match seq.contacts() {
        Some(c) => {
            let swap = |name: &String| {
                pairs
                    .iter()
                    .find_map(|(l, r)| {
                        if name == l {
                            Some(r.clone())
                        } else if name == r {
                            Some(l.clone())
                        } else {
                            None
                        }
                    })
                    .unwrap_or_else(|| name.clone())
            };
            let markers: Vec<String> = c.markers.iter().map(swap).collect();
            out.with_contacts(ContactMask {
                markers,
                flags: c.flags.clone(),
            })?
        }
        None => out,
    })
}

/// Places each wand marker at the midpoint of its two neighbours.
pub fn center_wand_markers(seq: &MotionSequence, triples: &[(String, String, String)]) -> Result<MotionSequence> {
    let idx = triples
        .iter()
        .map(|(a, w, b)| Ok((seq.marker_index(a)?, seq.marker_index(w)?, seq.marker_index(b)?)))
        .collect::<Result<Vec<_>>>()?;
    let coords = (0..seq.frames())
        .flat_map(|f| {
            let mut frame = seq.frame(f).to_vec();
            for &(a, w, b) in &idx {
                frame[w] = (frame[a] + frame[b]) * 0.5;
            }
            frame
        })
        .collect();
    let out = MotionSequence::from_flat(seq.markers().to_vec(), coords, seq.rate(), None);
    Ok(match seq.contacts() {
        Some(c) => out.with_contacts(c.clone())?,
        None => out,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn seq_of(frames: Vec<Vec<Point>>, rate: f64) -> MotionSequence {
        let n = frames[0].len();
        let markers = (0..n).map(|i| format!("M{i}")).collect();
        MotionSequence::new(markers, frames, rate).unwrap()
    }

    fn walking(n: usize, rate: f64, scale: f64) -> MotionSequence {
        let frames = (0..n)
            .map(|f| {
                let t = f as f64 / rate;
                vec![
                    Point::new(scale * t.sin(), scale * 0.3 * t, 1.0),
                    Point::new(0.2 + scale * (2.0 * t).cos(), 0.0, 1.5),
                    Point::new(-0.2, scale * t.cos(), 0.1),
                ]
            })
            .collect();
        seq_of(frames, rate)
    }

    #[test]
    fn downsample_counts() {
        let s = walking(1000, 250.0, 1.0);
        let d = downsample(&s, 25.0).unwrap();
        assert_eq!(d.frames(), 100);
        assert_eq!(d.rate(), 25.0);
        assert_eq!(d.frame(3), s.frame(30));
        assert_eq!(downsample(&s, 250.0).unwrap(), s);
        assert!(matches!(downsample(&s, 60.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn downsample_composes() {
        let s = walking(997, 240.0, 1.0);
        let twice = downsample(&downsample(&s, 120.0).unwrap(), 30.0).unwrap();
        assert_eq!(twice, downsample(&s, 30.0).unwrap());
    }

    #[test]
    fn long_clip_flagged_for_duration() {
        let mut data: Vec<_> = (0..10).map(|_| walking(100, 25.0, 1.0)).collect();
        data.push(walking(500, 25.0, 1.0));
        let report = detect_outliers(&data, 3.0, None).unwrap();
        let flagged: Vec<_> = report.flagged().collect();
        assert_eq!(flagged.len(), 1);
        assert_eq!(flagged[0].index, 10);
        assert!(flagged[0].flags.contains(&Statistic::Duration));
        // Ten equal values and one outlier: z = sqrt(10) with population std.
        assert!((flagged[0].z_duration - 10f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn identical_dataset_has_no_flags() {
        let data: Vec<_> = (0..5).map(|_| walking(50, 25.0, 1.0)).collect();
        let report = detect_outliers(&data, 3.0, Some("M1")).unwrap();
        assert_eq!(report.flagged().count(), 0);
        assert!(report.sequences.iter().all(|s| s.z_duration == 0.0 && s.z_displacement == 0.0));
    }

    #[test]
    fn static_clip_flagged_for_displacement() {
        let mut data: Vec<_> = (0..12).map(|i| walking(100, 25.0, 1.0 + 0.01 * i as f64)).collect();
        data.push(walking(100, 25.0, 0.0));
        let report = detect_outliers(&data, 3.0, None).unwrap();
        let flagged: Vec<_> = report.flagged().collect();
        assert_eq!(flagged.len(), 1);
        assert_eq!(flagged[0].index, 12);
        assert_eq!(flagged[0].flags, vec![Statistic::Displacement]);
        assert_eq!(flagged[0].static_prefix, 99);
    }

    #[test]
    fn missing_head_marker_errors() {
        let data: Vec<_> = (0..3).map(|_| walking(10, 25.0, 1.0)).collect();
        assert!(matches!(detect_outliers(&data, 3.0, Some("HEAD")), Err(Error::UnknownMarker(_))));
        assert!(detect_outliers(&data[..2], 3.0, None).is_err());
    }

    #[test]
    fn centering() {
        let s = seq_of(
            vec![
                vec![Point::new(3.0, -2.0, 1.0), Point::new(0.0, 0.0, 0.0)],
                vec![Point::new(4.0, -2.0, 1.5), Point::new(1.0, 1.0, 1.0)],
            ],
            25.0,
        );
        let c = center_to_origin(&s, "M0").unwrap();
        assert_eq!(c.position(0, 0), Point::new(0.0, 0.0, 1.0));
        assert_eq!(c.position(1, 1), Point::new(-2.0, 3.0, 1.0));
        assert_eq!(center_to_origin(&c, "M0").unwrap(), c);
        assert!(center_to_origin(&s, "X").is_err());
    }

    fn body_facing(angle: f64) -> MotionSequence {
        // Facing −y: left hip at +x.
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), angle);
        let base = [Point::new(0.1, 0.0, 0.9), Point::new(-0.1, 0.0, 0.9), Point::new(0.0, -0.1, 1.0)];
        let frames = (0..3).map(|f| base.iter().map(|p| rot * (p + Vector3::new(0.0, 0.0, 0.01 * f as f64))).collect()).collect();
        MotionSequence::new(names(&["LHIP", "RHIP", "NOSE"]), frames, 25.0).unwrap()
    }

    #[test]
    fn facing_plus_x_is_turned() {
        // Rotating a −y-facing body by +90° makes it face +x.
        let s = body_facing(std::f64::consts::FRAC_PI_2);
        let n = facing_normal(&s, "LHIP", "RHIP").unwrap();
        assert!((n - Vector3::x()).norm() < 1e-12);
        let r = rotate_to_facing(&s, "LHIP", "RHIP").unwrap();
        let n = facing_normal(&r, "LHIP", "RHIP").unwrap();
        assert!(n.dot(&-Vector3::y()) >= 1.0 - 1e-9);
        let nose = r.position(0, 2);
        assert!((nose - Point::new(0.0, -0.1, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn facing_identity_and_error() {
        let s = body_facing(0.0);
        let r = rotate_to_facing(&s, "LHIP", "RHIP").unwrap();
        for (a, b) in r.coords().iter().zip(s.coords()) {
            assert!((a - b).norm() < 1e-15);
        }
        let c = seq_of(vec![vec![Point::new(1.0, 1.0, 0.0), Point::new(1.0, 1.0, 2.0)]], 25.0);
        assert!(matches!(rotate_to_facing(&c, "M0", "M1"), Err(Error::Degenerate(_))));
    }

    #[test]
    fn mirror_swaps_and_reflects() {
        let s = MotionSequence::new(
            names(&["LANK", "RANK", "HEAD"]),
            vec![vec![Point::new(0.2, 0.0, 0.0), Point::new(-0.2, 0.5, 0.0), Point::new(0.1, 0.0, 1.7)]],
            25.0,
        )
        .unwrap();
        let pairs = vec![("LANK".to_string(), "RANK".to_string())];
        let m = mirror_left_to_right(&s, &pairs).unwrap();
        assert_eq!(m.position(0, 0), Point::new(0.2, 0.5, 0.0));
        assert_eq!(m.position(0, 1), Point::new(-0.2, 0.0, 0.0));
        assert_eq!(m.position(0, 2), Point::new(-0.1, 0.0, 1.7));
        assert_eq!(mirror_left_to_right(&m, &pairs).unwrap(), s);
        let bad = vec![("LANK".to_string(), "RKNE".to_string())];
        assert!(mirror_left_to_right(&s, &bad).is_err());
    }

    #[test]
    fn wand_midpoint() {
        let s = seq_of(vec![vec![Point::new(0.0, 0.0, 0.0), Point::new(5.0, 3.0, -1.0), Point::new(0.0, 0.0, 1.0)]], 25.0);
        let t = vec![("M0".to_string(), "M1".to_string(), "M2".to_string())];
        let c = center_wand_markers(&s, &t).unwrap();
        assert_eq!(c.position(0, 1), Point::new(0.0, 0.0, 0.5));
        assert_eq!(center_wand_markers(&c, &t).unwrap(), c);
        let bad = vec![("M0".to_string(), "W".to_string(), "M2".to_string())];
        assert!(center_wand_markers(&s, &bad).is_err());
    }

    fn arb_seq() -> impl Strategy<Value = MotionSequence> {
        (1usize..4, 3usize..6).prop_flat_map(|(frames, markers)| {
            prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), frames * markers).prop_map(move |v| {
                let frames_v = v.chunks(markers).map(|c| c.iter().map(|p| Point::new(p[0], p[1], p[2])).collect()).collect();
                seq_of(frames_v, 25.0)
            })
        })
    }

    fn distances(s: &MotionSequence, f: usize, skip: Option<usize>) -> Vec<f64> {
        let fr = s.frame(f);
        let mut out = Vec::new();
        for i in 0..fr.len() {
            for j in i + 1..fr.len() {
                if Some(i) != skip && Some(j) != skip {
                    out.push((fr[i] - fr[j]).norm());
                }
            }
        }
        out
    }

    fn same(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    proptest! {
        #[test]
        fn normalizations_are_isometries(s in arb_seq()) {
            let c = center_to_origin(&s, "M0").unwrap();
            let pairs = vec![("M0".to_string(), "M1".to_string())];
            let m = mirror_left_to_right(&s, &pairs).unwrap();
            let w = center_wand_markers(&s, &[("M0".into(), "M2".into(), "M1".into())]).unwrap();
            for f in 0..s.frames() {
                let d = distances(&s, f, None);
                prop_assert!(same(&d, &distances(&c, f, None)));
                let mut dm = distances(&m, f, None);
                let mut ds = d.clone();
                dm.sort_by(f64::total_cmp);
                ds.sort_by(f64::total_cmp);
                prop_assert!(same(&ds, &dm));
                prop_assert!(same(&distances(&s, f, Some(2)), &distances(&w, f, Some(2))));
            }
            if let Ok(r) = rotate_to_facing(&s, "M0", "M1") {
                for f in 0..s.frames() {
                    prop_assert!(same(&distances(&s, f, None), &distances(&r, f, None)));
                }
                let n = facing_normal(&r, "M0", "M1").unwrap();
                prop_assert!(n.dot(&-Vector3::y()) >= 1.0 - 1e-9);
            }
        }

        #[test]
        fn mirror_is_involution(s in arb_seq()) {
            let pairs = vec![("M0".to_string(), "M2".to_string())];
            let twice = mirror_left_to_right(&mirror_left_to_right(&s, &pairs).unwrap(), &pairs).unwrap();
            prop_assert_eq!(twice, s);
        }
    }
}
