//! Parametric full-body motion generator used as a desk-scale stand-in for
//! recorded data.
//!
//! Bodies face −y with +x to their left and z up. Each technique is a
//! family of joint-angle trajectories applied to a rigid 17-marker skeleton
//! by forward kinematics; skill shortens the movement window and damps a
//! ~4 Hz tremor on the active joints.

use std::f64::consts::PI;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{derive_foot_contacts, DatasetManifest, LimbSide, ManifestEntry, MotionSequence, Point, Split, Technique, Units};
use crate::error::{Error, Result};
use crate::pose::{ChainTopology, Link};

pub const MARKERS: [&str; 17] = [
    "HEAD", "CHEST", "PELV", "LSHO", "RSHO", "LELB", "LWRI", "RELB", "RWRI", "LHIP", "RHIP", "LKNE", "LANK",
    "LTOE", "RKNE", "RANK", "RTOE",
];

pub const FOOT_MARKERS: [&str; 4] = ["LANK", "RANK", "LTOE", "RTOE"];

pub const CONTACT_HEIGHT: f64 = 0.12;
pub const CONTACT_SPEED: f64 = 0.3;

const PELVIS_HEIGHT: f64 = 0.9539;

/// Chain over [`MARKERS`] rooted at the head so that every link points
/// downwards or sideways from its parent.
pub fn default_chain() -> ChainTopology {
    let links = [
        ("HEAD", "CHEST"),
        ("CHEST", "PELV"),
        ("CHEST", "LSHO"),
        ("CHEST", "RSHO"),
        ("LSHO", "LELB"),
        ("LELB", "LWRI"),
        ("RSHO", "RELB"),
        ("RELB", "RWRI"),
        ("PELV", "LHIP"),
        ("PELV", "RHIP"),
        ("LHIP", "LKNE"),
        ("LKNE", "LANK"),
        ("LANK", "LTOE"),
        ("RHIP", "RKNE"),
        ("RKNE", "RANK"),
        ("RANK", "RTOE"),
    ];
    ChainTopology::new("HEAD", links.iter().map(|(p, c)| Link::new(p, c)).collect()).expect("default chain is a tree")
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub techniques: Vec<Technique>,
    /// Skill levels in `[0, 1]`; one cell per (technique, skill).
    pub skills: Vec<f64>,
    pub samples_per_cell: usize,
    pub frames: usize,
    pub rate: f64,
    pub participants: usize,
    /// Std of per-frame link-length noise (m); 0 gives a rigid skeleton.
    pub link_jitter: f64,
    /// Relative std of per-sample movement amplitude.
    pub amplitude_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            techniques: Technique::ALL.to_vec(),
            skills: vec![0.0, 0.5, 1.0],
            samples_per_cell: 10,
            frames: 100,
            rate: 25.0,
            participants: 5,
            link_jitter: 0.0,
            amplitude_jitter: 0.08,
        }
    }
}

impl SynthConfig {
    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.techniques.len() < 2 {
            return bad("at least two technique classes are required");
        }
        if self.skills.is_empty() || self.skills.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return bad("skills must be a non-empty list of values in [0, 1]");
        }
        if self.samples_per_cell == 0 || self.participants == 0 {
            return bad("samples_per_cell and participants must be positive");
        }
        if self.frames < 8 {
            return bad("at least 8 frames are required");
        }
        if !(self.rate > 0.0) || !(self.link_jitter >= 0.0) || !(self.amplitude_jitter >= 0.0) {
            return bad("rate must be positive and jitters non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub sequences: Vec<MotionSequence>,
    /// Paths are bare file names; callers choose the directory.
    pub manifest: DatasetManifest,
    pub chain: ChainTopology,
    /// Exact skill scalar of each sample.
    pub skills: Vec<f64>,
}

/// Deterministic for a fixed `(config, seed)`.
pub fn generate_synthetic_dataset(config: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    config.check()?;
    let mut cells = Vec::new();
    for &t in &config.techniques {
        for &s in &config.skills {
            for k in 0..config.samples_per_cell {
                cells.push((t, s, k));
            }
        }
    }
    let foot: Vec<String> = FOOT_MARKERS.iter().map(|s| s.to_string()).collect();
    let sequences = cells
        .par_iter()
        .enumerate()
        .map(|(i, &(t, s, _))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let seq = generate_sample(config, t, s, &mut rng)?;
            let contacts = derive_foot_contacts(&seq, &foot, CONTACT_HEIGHT, CONTACT_SPEED)?;
            seq.with_contacts(contacts)
        })
        .collect::<Result<Vec<_>>>()?;
    let entries = cells
        .iter()
        .map(|&(t, s, k)| {
            let grade = grade_index_of(s);
            ManifestEntry {
                path: format!("{}_{:02}_{:03}.mdae", t.name(), grade, k).into(),
                participant: format!("S{:02}", k % config.participants),
                technique: t,
                grade_index: grade,
                limb_side: LimbSide::Right,
                split: match k % 10 {
                    0..=6 => Split::Train,
                    7 => Split::Validation,
                    _ => Split::Test,
                },
                rate_hz: Some(config.rate),
                units: Some(Units::M),
            }
        })
        .collect();
    Ok(SynthDataset {
        sequences,
        manifest: DatasetManifest::new(entries)?,
        chain: default_chain(),
        skills: cells.iter().map(|c| c.1).collect(),
    })
}

pub fn grade_index_of(skill: f64) -> u8 {
    (skill * 12.0).round() as u8
}

/// Joint angles (radians) for one frame; left limbs hold a guard.
#[derive(Clone, Copy, Default)]
struct Pose {
    yaw: f64,
    spine_twist: f64,
    spine_lean: f64,
    r_shoulder_flex: f64,
    r_elbow_flex: f64,
    r_hip_flex: f64,
    r_hip_abduct: f64,
    r_knee_flex: f64,
    l_shoulder_flex: f64,
    l_elbow_flex: f64,
    l_knee_flex: f64,
    /// Upper-body idle sway: side lean, forward bend, arm swing.
    sway: [f64; 3],
}

struct Sample {
    technique: Technique,
    amplitude: f64,
    onset: f64,
    window: f64,
    tremor: f64,
    tremor_phase: f64,
    sway_phase: f64,
}

fn bell(p: f64) -> f64 {
    if (0.0..=1.0).contains(&p) {
        (PI * p).sin().powi(2)
    } else {
        0.0
    }
}

/// Narrow bump centred in the window.
fn snap(p: f64) -> f64 {
    bell((p - 0.3) / 0.4)
}

impl Sample {
    fn pose(&self, t: f64) -> Pose {
        let p = (t - self.onset) / self.window;
        let b = bell(p) * self.amplitude;
        let x = snap(p) * self.amplitude;
        let active = if (0.0..=1.0).contains(&p) { 1.0 } else { 0.0 };
        let tremor = active * self.tremor * (2.0 * PI * 4.0 * t + self.tremor_phase).sin();
        let mut pose = Pose {
            r_shoulder_flex: 0.3,
            r_elbow_flex: 1.3,
            l_shoulder_flex: 0.5,
            l_elbow_flex: 1.4,
            l_knee_flex: 0.15,
            r_knee_flex: 0.15,
            sway: [
                0.03 * (2.0 * PI * 0.5 * t + self.sway_phase).sin(),
                0.03 * (2.0 * PI * 0.3 * t + 2.0 * self.sway_phase).sin(),
                0.05 * (2.0 * PI * 0.7 * t + self.sway_phase).sin(),
            ],
            ..Pose::default()
        };
        match self.technique {
            Technique::RP => {
                pose.r_shoulder_flex += 1.2 * b + tremor;
                pose.r_elbow_flex -= 1.2 * x;
                pose.spine_twist = 0.35 * b;
            }
            Technique::FK => {
                pose.r_hip_flex = 1.4 * b + tremor;
                pose.r_knee_flex += 1.4 * b - 1.3 * x;
            }
            Technique::LRK | Technique::HRK => {
                let lift = if self.technique == Technique::LRK { 0.8 } else { 1.5 };
                pose.r_hip_abduct = lift * b + tremor;
                pose.r_hip_flex = 0.3 * b;
                pose.r_knee_flex += 1.4 * b - 1.3 * x;
                pose.spine_lean = 0.4 * lift * b;
            }
            Technique::SBK => {
                pose.yaw = 2.0 * PI * smoothstep(p);
                pose.r_hip_flex = -1.2 * x - tremor;
                pose.r_knee_flex += 1.0 * b - 0.9 * x;
            }
        }
        pose
    }
}

impl Pose {
    /// Support-leg hip flexion that keeps the flexed knee's ankle under the hip.
    fn l_hip_flex(&self) -> f64 {
        self.l_knee_flex / 2.0
    }
}

fn smoothstep(p: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    p * p * (3.0 - 2.0 * p)
}

fn generate_sample(config: &SynthConfig, technique: Technique, skill: f64, rng: &mut ChaCha8Rng) -> Result<MotionSequence> {
    let frames = config.frames as f64;
    let dt = 1.0 / config.rate;
    let window = frames * (0.85 - 0.4 * skill) * dt;
    let margin = 0.05 * frames * dt;
    let slack = (frames * dt - window - 2.0 * margin).clamp(0.0, 0.1 * frames * dt);
    let sample = Sample {
        technique,
        amplitude: 1.0 + config.amplitude_jitter * rng.random_range(-1.0..1.0),
        onset: margin + rng.random_range(0.0..=1.0) * slack,
        window,
        tremor: (1.0 - skill) * 0.08,
        tremor_phase: rng.random_range(0.0..2.0 * PI),
        sway_phase: rng.random_range(0.0..2.0 * PI),
    };
    let noise = Normal::new(0.0, config.link_jitter.max(f64::MIN_POSITIVE)).expect("valid std");
    let frames = (0..config.frames)
        .map(|f| {
            let mut lens = REST_LENGTHS;
            if config.link_jitter > 0.0 {
                for l in &mut lens {
                    *l += noise.sample(rng);
                }
            }
            forward_kinematics(&sample.pose(f as f64 * dt), &lens)
        })
        .collect();
    MotionSequence::new(MARKERS.iter().map(|s| s.to_string()).collect(), frames, config.rate)
}

// Segment order: spine, neck, l/r clavicle, l/r upper arm, l/r forearm,
// l/r pelvis side, l/r thigh, l/r shin, l/r foot.
const REST_LENGTHS: [f64; 16] = [
    0.30, 0.25, 0.18, 0.18, 0.28, 0.28, 0.25, 0.25, 0.11, 0.11, 0.42, 0.42, 0.42, 0.42, 0.12, 0.12,
];

fn rx(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), a)
}

fn ry(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), a)
}

fn rz(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), a)
}

/// Marker positions in [`MARKERS`] order. Yaw pivots about the left ankle,
/// which never leaves the floor.
fn forward_kinematics(pose: &Pose, len: &[f64; 16]) -> Vec<Point> {
    let up = Vector3::z();
    let down = -Vector3::z();
    let side = |s: f64, z: f64| Vector3::new(s, 0.0, z).normalize();
    let toe_dir = Vector3::new(0.0, -1.0, -0.5).normalize();

    let root = rz(pose.yaw);
    let l_thigh = root * rx(-pose.l_hip_flex());
    let l_shin = l_thigh * rx(pose.l_knee_flex);
    let rest_ankle = side(1.0, -0.3) * len[8] + l_thigh * down * len[10] + l_shin * down * len[12];
    let pivot = rz(-pose.yaw) * rest_ankle;
    let offset = pivot - rest_ankle;
    let pelv = Point::new(offset.x, offset.y, PELVIS_HEIGHT);
    let spine = root * rz(pose.spine_twist) * ry(pose.spine_lean + pose.sway[0]) * rx(-pose.sway[1]);
    let chest = pelv + spine * up * len[0];
    let head = chest + spine * up * len[1];
    let lsho = chest + spine * side(1.0, 0.15) * len[2];
    let rsho = chest + spine * side(-1.0, 0.15) * len[3];

    let l_upper = spine * rx(-pose.l_shoulder_flex - pose.sway[2]);
    let r_upper = spine * rx(-pose.r_shoulder_flex + pose.sway[2]);
    let lelb = lsho + l_upper * down * len[4];
    let relb = rsho + r_upper * down * len[5];
    let lwri = lelb + l_upper * rx(-pose.l_elbow_flex) * down * len[6];
    let rwri = relb + r_upper * rx(-pose.r_elbow_flex) * down * len[7];

    let lhip = pelv + root * side(1.0, -0.3) * len[8];
    let rhip = pelv + root * side(-1.0, -0.3) * len[9];
    let r_thigh = root * ry(pose.r_hip_abduct) * rx(-pose.r_hip_flex);
    let lkne = lhip + l_thigh * down * len[10];
    let rkne = rhip + r_thigh * down * len[11];
    let r_shin = r_thigh * rx(pose.r_knee_flex);
    let lank = lkne + l_shin * down * len[12];
    let rank = rkne + r_shin * down * len[13];
    let ltoe = lank + root * toe_dir * len[14];
    let rtoe = rank + r_shin * rx(-pose.r_knee_flex + pose.r_hip_flex * 0.5) * toe_dir * len[15];

    vec![
        head, chest, pelv, lsho, rsho, lelb, lwri, relb, rwri, lhip, rhip, lkne, lank, ltoe, rkne, rank, rtoe,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            techniques: vec![Technique::LRK, Technique::HRK],
            skills: vec![0.0, 1.0],
            samples_per_cell: 25,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn counts_and_balance() {
        let d = generate_synthetic_dataset(&small(), 1).unwrap();
        assert_eq!(d.manifest.entries.len(), 100);
        assert_eq!(d.sequences.len(), 100);
        for t in [Technique::LRK, Technique::HRK] {
            for g in [0, 12] {
                let n = d
                    .manifest
                    .entries
                    .iter()
                    .filter(|e| e.technique == t && e.grade_index == g)
                    .count();
                assert_eq!(n, 25);
            }
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic_dataset(&small(), 7).unwrap();
        let b = generate_synthetic_dataset(&small(), 7).unwrap();
        let c = generate_synthetic_dataset(&small(), 8).unwrap();
        assert_eq!(a.sequences, b.sequences);
        assert_ne!(a.sequences[0].coords(), c.sequences[0].coords());
    }

    #[test]
    fn rigid_links() {
        let d = generate_synthetic_dataset(&small(), 3).unwrap();
        let chain = default_chain();
        for seq in d.sequences.iter().take(10) {
            for l in chain.links() {
                let p = seq.marker_index(&l.parent).unwrap();
                let c = seq.marker_index(&l.child).unwrap();
                let lens: Vec<f64> = (0..seq.frames())
                    .map(|f| (seq.position(f, c) - seq.position(f, p)).norm())
                    .collect();
                let spread = lens.iter().cloned().fold(f64::MIN, f64::max) - lens.iter().cloned().fold(f64::MAX, f64::min);
                assert!(spread < 1e-12, "{}->{} spread {spread}", l.parent, l.child);
            }
        }
    }

    #[test]
    fn rejects_single_class() {
        let c = SynthConfig {
            techniques: vec![Technique::RP],
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic_dataset(&c, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn stands_on_the_floor_facing_forward() {
        let d = generate_synthetic_dataset(&SynthConfig { samples_per_cell: 1, ..SynthConfig::default() }, 0).unwrap();
        let seq = &d.sequences[0];
        let frame = seq.frame(0);
        let toe = frame[seq.marker_index("LTOE").unwrap()];
        let ank = frame[seq.marker_index("LANK").unwrap()];
        assert!(toe.z > 0.0 && toe.z < 0.05);
        assert!(toe.y < ank.y);
        let contacts = seq.contacts().unwrap();
        assert!(contacts.flags[0].iter().all(|&c| c));
    }

    #[test]
    fn high_kick_lifts_the_foot_higher() {
        let d = generate_synthetic_dataset(&small(), 2).unwrap();
        let peak = |t: Technique| {
            let i = d.manifest.entries.iter().position(|e| e.technique == t).unwrap();
            let seq = &d.sequences[i];
            let m = seq.marker_index("RANK").unwrap();
            seq.trajectory(m).map(|p| p.z).fold(f64::MIN, f64::max)
        };
        assert!(peak(Technique::HRK) > peak(Technique::LRK) + 0.2);
    }
}
