//! Linear attribute head over semantic codes and guided manipulation.

mod guide;
mod head;

use ndarray::Array2;

pub use guide::{
    direction, find_lambda_max, guided_manipulate, Direction, GuideOptions, LambdaMax, LambdaSearch, Manipulation,
    Targets, TracePoint,
};
pub use head::{AttributeHead, HeadConfig, Prediction, ZStats, CLASSES};

use crate::diffusion::{decode, stochastic_encode, SamplingMode, StochasticCode};
use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::network::Checkpoint;
use crate::pose::{decode_sequence, encode_sequence, Distances, PoseFeatures};

/// A motion split into its semantic and stochastic codes.
#[derive(Clone, Debug)]
pub struct EncodedMotion {
    pub features: PoseFeatures,
    pub z: Vec<f64>,
    pub code: StochasticCode,
}

fn topology(ckpt: &Checkpoint) -> Result<crate::pose::ChainTopology> {
    ckpt.chain
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("checkpoint has no chain".into()))?
        .topology()
}

/// Semantic code of a marker sequence.
pub fn embed_sequence(seq: &MotionSequence, ckpt: &Checkpoint) -> Result<Vec<f64>> {
    let features = encode_sequence(seq, &topology(ckpt)?, Distances::Measured)?;
    let x = ckpt.model.norm().normalize(&features.to_matrix());
    ckpt.model.semantic_encode(&x, x.nrows())
}

pub fn encode_motion(seq: &MotionSequence, ckpt: &Checkpoint, steps: usize) -> Result<EncodedMotion> {
    let features = encode_sequence(seq, &topology(ckpt)?, Distances::Measured)?;
    let x = ckpt.model.norm().normalize(&features.to_matrix());
    let z = ckpt.model.semantic_encode(&x, x.nrows())?;
    let code = stochastic_encode(&x, &z, &ckpt.model, &ckpt.schedule, steps)?;
    Ok(EncodedMotion { features, z, code })
}

/// Deterministic decode of the stochastic code under semantic code `z`,
/// reconstructed with the input's own link lengths.
pub fn decode_motion(encoded: &EncodedMotion, z: &[f64], ckpt: &Checkpoint) -> Result<MotionSequence> {
    let x = decode(
        &encoded.code.x_t,
        z,
        &ckpt.model,
        &ckpt.schedule,
        encoded.code.steps,
        SamplingMode::Deterministic,
    )?;
    let m: Array2<f64> = ckpt.model.norm().denormalize(&x);
    let features = PoseFeatures::from_matrix(encoded.features.chain().clone(), encoded.features.rate(), &m)?;
    decode_sequence(&features)
}

#[derive(Clone, Debug)]
pub struct ManipulatedMotion {
    pub sequence: MotionSequence,
    pub manipulation: Manipulation,
}

pub fn manipulate_motion(
    seq: &MotionSequence,
    targets: &Targets,
    ckpt: &Checkpoint,
    head: &AttributeHead,
    options: &GuideOptions,
    steps: usize,
) -> Result<ManipulatedMotion> {
    if head.dim() != ckpt.model.dims().d_z {
        return Err(Error::Shape(format!(
            "head expects {}-dimensional codes, model produces {}",
            head.dim(),
            ckpt.model.dims().d_z
        )));
    }
    let encoded = encode_motion(seq, ckpt, steps)?;
    let manipulation = guided_manipulate(&encoded.z, head, targets, options)?;
    let sequence = decode_motion(&encoded, &manipulation.z, ckpt)?;
    Ok(ManipulatedMotion { sequence, manipulation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{NoiseSchedule, ScheduleKind};
    use crate::motion::{generate_synthetic_dataset, SynthConfig, Technique};
    use crate::network::{Dims, FeatureNorm, Model, TrainConfig};

    fn fixture() -> (Vec<MotionSequence>, Checkpoint, AttributeHead) {
        let cfg = SynthConfig {
            techniques: vec![Technique::LRK, Technique::HRK],
            skills: vec![0.5],
            samples_per_cell: 2,
            frames: 20,
            ..SynthConfig::default()
        };
        let d = generate_synthetic_dataset(&cfg, 3).unwrap();
        let mats: Vec<_> = d
            .sequences
            .iter()
            .map(|s| encode_sequence(s, &d.chain, Distances::Measured).unwrap().to_matrix())
            .collect();
        let norm = FeatureNorm::fit(&mats).unwrap();
        let dims = Dims {
            d_model: 16,
            heads: 2,
            layers: 1,
            d_ff: 16,
            d_z: 4,
            max_frames: 20,
            ..Dims::new(mats[0].ncols())
        };
        let model = Model::new(dims, norm, 2).unwrap();
        let chain = crate::pose::ChainFile {
            root: d.chain.root().to_string(),
            links: d.chain.links().to_vec(),
            distances: None,
        };
        let ckpt = Checkpoint {
            model,
            schedule: NoiseSchedule::new(ScheduleKind::Cosine, 100).unwrap(),
            config: TrainConfig::default(),
            step: 0,
            chain: Some(chain),
            decode_steps: 5,
            moments: Vec::new(),
        };
        let zs: Vec<Vec<f64>> = d.sequences.iter().map(|s| embed_sequence(s, &ckpt).unwrap()).collect();
        let metas: Vec<_> = d.manifest.entries.iter().map(|e| e.meta()).collect();
        let head = AttributeHead::train(&zs, &metas, &HeadConfig::default()).unwrap();
        (d.sequences, ckpt, head)
    }

    fn link_lengths(seq: &MotionSequence, ckpt: &Checkpoint) -> Vec<Vec<f64>> {
        let topo = topology(ckpt).unwrap();
        let idx = |n: &str| seq.marker_index(n).unwrap();
        (0..seq.frames())
            .map(|f| {
                topo.links()
                    .iter()
                    .map(|l| (seq.position(f, idx(&l.child)) - seq.position(f, idx(&l.parent))).norm())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn current_targets_give_plain_reconstruction() {
        let (seqs, ckpt, head) = fixture();
        let z = embed_sequence(&seqs[0], &ckpt).unwrap();
        let p = head.predict(&z).unwrap();
        let targets = Targets {
            technique: Some(p.technique()),
            grade: Some(p.grade),
        };
        let out = manipulate_motion(&seqs[0], &targets, &ckpt, &head, &GuideOptions::default(), 5).unwrap();
        assert_eq!(out.manipulation.lambda, 0.0);
        let enc = encode_motion(&seqs[0], &ckpt, 5).unwrap();
        let plain = decode_motion(&enc, &enc.z, &ckpt).unwrap();
        assert_eq!(out.sequence, plain);
    }

    #[test]
    fn output_keeps_link_lengths() {
        let (seqs, ckpt, head) = fixture();
        let targets = Targets {
            technique: Some(Technique::SBK),
            grade: Some(1.0),
        };
        let out = manipulate_motion(&seqs[1], &targets, &ckpt, &head, &GuideOptions::default(), 5).unwrap();
        let stored = encode_sequence(&seqs[1], &topology(&ckpt).unwrap(), Distances::Measured)
            .unwrap()
            .chain()
            .distances()
            .to_vec();
        for frame in link_lengths(&out.sequence, &ckpt) {
            for (a, b) in frame.iter().zip(&stored) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn mismatched_head_is_rejected() {
        let (seqs, ckpt, _) = fixture();
        let head = AttributeHead::zeros(ZStats {
            mean: vec![0.0; 7],
            std: vec![1.0; 7],
        });
        let targets = Targets {
            technique: Some(Technique::FK),
            grade: None,
        };
        assert!(manipulate_motion(&seqs[0], &targets, &ckpt, &head, &GuideOptions::default(), 5).is_err());
    }
}
