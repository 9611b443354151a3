//! Reversible mapping between marker coordinates and per-link 6D rotation
//! features over a chain of adjacent markers.
//!
//! Each link `(a, b)` is encoded as the rotation, about `a`, that takes the
//! direction from `a` towards the origin onto the direction from `a` towards
//! `b`; the rotation is stored as the first two columns of its matrix.
//! Link lengths are per-sample constants carried in the [`SkeletonChain`]
//! and never pass through a model.

mod chain;
mod diff;
pub mod geometry;

use std::path::Path;

use nalgebra::Matrix3x2;
use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::motion::{MotionSequence, Point};

pub use chain::{ChainFile, ChainTopology, Link, SkeletonChain};
pub use diff::reconstruct_positions;
pub use geometry::{
    angle_of, axis_angle_between, axis_of, from_stiefel, reconstruct_marker, rodrigues_matrix,
    rotate_rodrigues, to_stiefel, AxisAngle,
};

const FEAT_MAGIC: &[u8; 4] = b"MDAF";
const FEAT_VERSION: u32 = 1;

/// Scalars per link.
pub const LINK_DIM: usize = 6;
/// Scalars of the root trajectory per frame.
pub const ROOT_DIM: usize = 3;

/// A 3x2 block stored column-major: `[r1x, r1y, r1z, r2x, r2y, r2z]`.
pub type StiefelBlock = [f64; LINK_DIM];

fn block_of(m: &Matrix3x2<f64>) -> StiefelBlock {
    let mut b = [0.0; LINK_DIM];
    b.copy_from_slice(m.as_slice());
    b
}

fn matrix_of(b: &StiefelBlock) -> Matrix3x2<f64> {
    Matrix3x2::from_column_slice(b)
}

#[derive(Clone, Copy, Debug)]
pub enum Distances<'a> {
    /// Per-link mean over all frames of the sample.
    Measured,
    Provided(&'a [f64]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseFeatures {
    chain: SkeletonChain,
    rate: f64,
    root: Vec<Point>,
    /// Frame-major, `frames * links` blocks.
    blocks: Vec<StiefelBlock>,
}

impl PoseFeatures {
    pub fn new(chain: SkeletonChain, rate: f64, root: Vec<Point>, blocks: Vec<StiefelBlock>) -> Result<Self> {
        if blocks.len() != root.len() * chain.links().len() {
            return Err(Error::Shape(format!(
                "{} blocks for {} frames of {} links",
                blocks.len(),
                root.len(),
                chain.links().len()
            )));
        }
        if root.iter().any(|p| !p.iter().all(|v| v.is_finite()))
            || blocks.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(Error::Shape("non-finite feature value".into()));
        }
        Ok(PoseFeatures {
            chain,
            rate,
            root,
            blocks,
        })
    }

    pub fn chain(&self) -> &SkeletonChain {
        &self.chain
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn frames(&self) -> usize {
        self.root.len()
    }

    pub fn root(&self) -> &[Point] {
        &self.root
    }

    pub fn block(&self, frame: usize, link: usize) -> &StiefelBlock {
        &self.blocks[frame * self.chain.links().len() + link]
    }

    /// Width of one frame in the flat feature layout.
    pub fn feature_dim(&self) -> usize {
        feature_dim(self.chain.links().len())
    }

    /// `frames × (3 + 6·links)`: root position then each link's block.
    pub fn to_matrix(&self) -> Array2<f64> {
        let n_links = self.chain.links().len();
        Array2::from_shape_fn((self.frames(), self.feature_dim()), |(f, c)| {
            if c < ROOT_DIM {
                self.root[f][c]
            } else {
                let c = c - ROOT_DIM;
                self.blocks[f * n_links + c / LINK_DIM][c % LINK_DIM]
            }
        })
    }

    pub fn from_matrix(chain: SkeletonChain, rate: f64, m: &Array2<f64>) -> Result<Self> {
        let n_links = chain.links().len();
        if m.ncols() != feature_dim(n_links) {
            return Err(Error::Shape(format!(
                "feature matrix has {} columns, chain needs {}",
                m.ncols(),
                feature_dim(n_links)
            )));
        }
        let root = m.rows().into_iter().map(|r| Point::new(r[0], r[1], r[2])).collect();
        let mut blocks = Vec::with_capacity(m.nrows() * n_links);
        for r in m.rows() {
            for l in 0..n_links {
                let mut b = [0.0; LINK_DIM];
                for (k, v) in b.iter_mut().enumerate() {
                    *v = r[ROOT_DIM + l * LINK_DIM + k];
                }
                blocks.push(b);
            }
        }
        PoseFeatures::new(chain, rate, root, blocks)
    }
}

pub fn feature_dim(links: usize) -> usize {
    ROOT_DIM + LINK_DIM * links
}

/// Per-frame, per-link axis-angle → Rodrigues matrix → 6D block.
pub fn encode_sequence(seq: &MotionSequence, topology: &ChainTopology, distances: Distances<'_>) -> Result<PoseFeatures> {
    let root_idx = seq.marker_index(topology.root())?;
    let pairs = topology
        .links()
        .iter()
        .map(|l| Ok((seq.marker_index(&l.parent)?, seq.marker_index(&l.child)?)))
        .collect::<Result<Vec<_>>>()?;
    let frames = seq.frames();
    let per_frame: Vec<Vec<StiefelBlock>> = (0..frames)
        .into_par_iter()
        .map(|f| {
            pairs
                .iter()
                .enumerate()
                .map(|(l, &(p, c))| {
                    let a = seq.position(f, p);
                    let b = seq.position(f, c);
                    let aa = axis_angle_between(&a, &b).map_err(|e| degenerate(topology, f, l, e))?;
                    let r = rodrigues_matrix(&aa.axis, aa.angle)?;
                    Ok(block_of(&to_stiefel(&r)))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let lengths = match distances {
        Distances::Measured => pairs
            .iter()
            .map(|&(p, c)| {
                (0..frames)
                    .map(|f| (seq.position(f, c) - seq.position(f, p)).norm())
                    .sum::<f64>()
                    / frames as f64
            })
            .collect(),
        Distances::Provided(d) => d.to_vec(),
    };
    let chain = SkeletonChain::new(topology.clone(), lengths)?;
    PoseFeatures::new(
        chain,
        seq.rate(),
        seq.trajectory(root_idx).collect(),
        per_frame.into_iter().flatten().collect(),
    )
}

fn degenerate(topology: &ChainTopology, frame: usize, link: usize, e: Error) -> Error {
    let l = &topology.links()[link];
    Error::DegenerateLink {
        frame,
        link,
        parent: l.parent.clone(),
        child: l.child.clone(),
        reason: e.to_string(),
    }
}

/// Rebuilds marker positions in chain order (root, then each link's child).
pub fn decode_sequence(features: &PoseFeatures) -> Result<MotionSequence> {
    let chain = features.chain();
    let topology = chain.topology();
    let parents = topology.parent_indices();
    let n_links = chain.links().len();
    let frames: Vec<Vec<Point>> = (0..features.frames())
        .into_par_iter()
        .map(|f| {
            let mut pos = Vec::with_capacity(n_links + 1);
            pos.push(features.root[f]);
            for l in 0..n_links {
                let a = pos[parents[l]];
                let b = decode_link(&a, features.block(f, l), chain.distances()[l])
                    .map_err(|e| degenerate(topology, f, l, e))?;
                pos.push(b);
            }
            Ok(pos)
        })
        .collect::<Result<_>>()?;
    MotionSequence::new(topology.markers(), frames, features.rate)
}

fn decode_link(a: &Point, block: &StiefelBlock, d: f64) -> Result<Point> {
    let r = from_stiefel(&matrix_of(block))?;
    let theta = angle_of(&r);
    if theta < geometry::ANGLE_EPS {
        return reconstruct_marker(a, &Point::z(), 0.0, d);
    }
    let k = axis_of(&r, theta)?;
    reconstruct_marker(a, &k, theta, d)
}

#[derive(Clone, Debug, Serialize)]
pub struct LinkStats {
    pub parent: String,
    pub child: String,
    /// Mean over sequences of the per-sequence standard deviation (m).
    pub distance_std: f64,
    pub mean_distance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AnatomyReport {
    pub sequences: usize,
    pub links: Vec<LinkStats>,
    /// Mean over links of `distance_std` (m).
    pub mean_distance_std: f64,
    /// Mean Euclidean marker error of decode∘encode (m).
    pub mean_round_trip_error: f64,
    pub max_round_trip_error: f64,
}

/// Link-length variability and round-trip error over a dataset.
struct SequenceAnatomy {
    stds: Vec<f64>,
    means: Vec<f64>,
    error_sum: f64,
    error_max: f64,
    count: usize,
}

pub fn anatomy_report(dataset: &[MotionSequence], topology: &ChainTopology) -> Result<AnatomyReport> {
    let n_links = topology.links().len();
    let per_seq: Vec<SequenceAnatomy> = dataset
        .par_iter()
        .map(|seq| {
            let mut stds = Vec::with_capacity(n_links);
            let mut means = Vec::with_capacity(n_links);
            for l in topology.links() {
                let p = seq.marker_index(&l.parent)?;
                let c = seq.marker_index(&l.child)?;
                let d: Vec<f64> = (0..seq.frames())
                    .map(|f| (seq.position(f, c) - seq.position(f, p)).norm())
                    .collect();
                let mean = d.iter().sum::<f64>() / d.len() as f64;
                let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64;
                stds.push(var.sqrt());
                means.push(mean);
            }
            let features = encode_sequence(seq, topology, Distances::Measured)?;
            let decoded = decode_sequence(&features)?;
            let mut sum = 0.0;
            let mut max: f64 = 0.0;
            let mut count = 0;
            for (j, name) in decoded.markers().iter().enumerate() {
                let m = seq.marker_index(name)?;
                for f in 0..seq.frames() {
                    let e = (decoded.position(f, j) - seq.position(f, m)).norm();
                    sum += e;
                    max = max.max(e);
                    count += 1;
                }
            }
            Ok(SequenceAnatomy {
                stds,
                means,
                error_sum: sum,
                error_max: max,
                count,
            })
        })
        .collect::<Result<_>>()?;
    let n = per_seq.len().max(1) as f64;
    let links = topology
        .links()
        .iter()
        .enumerate()
        .map(|(l, link)| LinkStats {
            parent: link.parent.clone(),
            child: link.child.clone(),
            distance_std: per_seq.iter().map(|s| s.stds[l]).sum::<f64>() / n,
            mean_distance: per_seq.iter().map(|s| s.means[l]).sum::<f64>() / n,
        })
        .collect::<Vec<_>>();
    let total: f64 = per_seq.iter().map(|s| s.error_sum).sum();
    let count: usize = per_seq.iter().map(|s| s.count).sum();
    Ok(AnatomyReport {
        sequences: per_seq.len(),
        mean_distance_std: links.iter().map(|l| l.distance_std).sum::<f64>() / links.len().max(1) as f64,
        links,
        mean_round_trip_error: total / count.max(1) as f64,
        max_round_trip_error: per_seq.iter().map(|s| s.error_max).fold(0.0, f64::max),
    })
}

pub fn save_features(features: &PoseFeatures, path: &Path) -> Result<()> {
    let mut w = Writer::new(FEAT_MAGIC, FEAT_VERSION);
    w.u64(features.frames() as u64);
    w.u64(features.chain.links().len() as u64);
    w.f64(features.rate);
    for p in &features.root {
        w.f64s(p.as_slice());
    }
    for b in &features.blocks {
        w.f64s(b);
    }
    w.blob(serde_json::to_string(&features.chain.to_file())?.as_bytes());
    w.write_to(path)
}

pub fn load_features(path: &Path) -> Result<PoseFeatures> {
    let buf = read_file(path)?;
    let mut r = Reader::open(&buf, FEAT_MAGIC, FEAT_VERSION)?;
    let frames = r.len()?;
    let links = r.len()?;
    let rate = r.f64()?;
    let root = r
        .f64s(frames * ROOT_DIM)?
        .chunks_exact(3)
        .map(Point::from_column_slice)
        .collect();
    let blocks = r
        .f64s(frames * links * LINK_DIM)?
        .chunks_exact(LINK_DIM)
        .map(|c| c.try_into().unwrap())
        .collect();
    let file: ChainFile = serde_json::from_slice(r.blob()?)?;
    r.finish()?;
    let chain = SkeletonChain::from_file(file)?;
    if chain.links().len() != links {
        return Err(Error::Corrupt(format!(
            "header declares {links} links, embedded chain has {}",
            chain.links().len()
        )));
    }
    PoseFeatures::new(chain, rate, root, blocks)
}
