//! Trains a small model on a two-class synthetic dataset, then reports
//! reconstruction, separability and manipulation results.
//!
//! Sizes can be overridden with environment variables, e.g.
//! `STEPS=500 D_MODEL=32 cargo run --release --example desk_scale`.

use std::time::Instant;

use mdae::diffusion::{decode, NoiseSchedule, SamplingMode, ScheduleKind};
use mdae::evaluate::confusion_and_uar;
use mdae::manipulate::{embed_sequence, manipulate_motion, AttributeHead, GuideOptions, HeadConfig, Targets};
use mdae::motion::{generate_synthetic_dataset, Split, SynthConfig, Technique};
use mdae::network::{load_checkpoint, loss_total, save_checkpoint, Checkpoint, Dims, FeatureNorm, Model, TrainConfig, TrainSample, Trainer};
use mdae::pose::{encode_sequence, ChainFile, Distances};

fn knob<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> mdae::Result<()> {
    let frames: usize = knob("FRAMES", 40);
    let steps: usize = knob("STEPS", 2000);
    let decode_steps: usize = knob("DECODE_STEPS", 20);
    let classes = [Technique::LRK, Technique::HRK];
    let synth = SynthConfig {
        techniques: classes.to_vec(),
        skills: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        samples_per_cell: knob("PER_CELL", 20),
        frames,
        ..SynthConfig::default()
    };
    let data = generate_synthetic_dataset(&synth, knob("SEED", 11))?;
    let features: Vec<_> = data
        .sequences
        .iter()
        .map(|s| encode_sequence(s, &data.chain, Distances::Measured))
        .collect::<Result<_, _>>()?;
    let train_idx = data.manifest.split_indices(Split::Train);
    let test_idx: Vec<usize> = data
        .manifest
        .split_indices(Split::Test)
        .into_iter()
        .chain(data.manifest.split_indices(Split::Validation))
        .collect();
    let mats: Vec<_> = train_idx.iter().map(|&i| features[i].to_matrix()).collect();
    let norm = FeatureNorm::fit(&mats)?;
    let dims = Dims {
        d_model: knob("D_MODEL", 32),
        heads: knob("HEADS", 4),
        layers: knob("LAYERS", 2),
        d_ff: knob("D_FF", 64),
        d_z: knob("D_Z", 16),
        max_frames: frames,
        ..Dims::new(features[0].feature_dim())
    };
    let model = Model::new(dims, norm.clone(), 1)?;
    println!("train {} test {} params {}", train_idx.len(), test_idx.len(), model.parameter_count());
    let samples: Vec<TrainSample> = train_idx
        .iter()
        .map(|&i| TrainSample::new(&features[i], data.sequences[i].contacts(), &norm))
        .collect::<Result<_, _>>()?;
    let config = TrainConfig {
        learning_rate: knob("LR", 2e-3),
        batch_size: knob("BATCH", 16),
        steps,
        ..TrainConfig::default()
    };
    let schedule = NoiseSchedule::new(ScheduleKind::Cosine, knob("T", 1000))?;
    let clock = Instant::now();
    let cache = std::env::var("CKPT").ok().map(std::path::PathBuf::from);
    let model = match cache.as_deref().filter(|p| p.exists()) {
        Some(path) => load_checkpoint(path)?.model,
        None => {
            let before = loss_total(&model, &samples, &config, &schedule, 99)?;
            let mut trainer = Trainer::new(model, config.clone(), schedule.clone())?;
            for s in 0..steps {
                let r = trainer.step(&samples)?;
                if s % 100 == 0 {
                    println!("step {s} loss {:.4} ({:.1}s)", r.loss.total, clock.elapsed().as_secs_f64());
                }
            }
            let model = trainer.into_model();
            let after = loss_total(&model, &samples, &config, &schedule, 99)?;
            println!("loss {:.4} -> {:.4} ({:.1}% drop)", before.total, after.total, 100.0 * (1.0 - after.total / before.total));
            println!("  before {before:?}\n  after  {after:?}");
            model
        }
    };

    let ckpt = Checkpoint {
        model,
        schedule,
        config,
        step: steps,
        chain: Some(ChainFile {
            root: data.chain.root().to_string(),
            links: data.chain.links().to_vec(),
            distances: None,
        }),
        decode_steps,
        moments: Vec::new(),
    };
    if let Some(path) = cache.as_deref().filter(|p| !p.exists()) {
        save_checkpoint(&ckpt, path)?;
    }

    let mut err = 0.0;
    let mut count = 0.0;
    for &i in &test_idx {
        let x = norm.normalize(&features[i].to_matrix());
        let z = ckpt.model.semantic_encode(&x, x.nrows())?;
        let code = mdae::diffusion::stochastic_encode(&x, &z, &ckpt.model, &ckpt.schedule, decode_steps)?;
        let back = decode(&code.x_t, &z, &ckpt.model, &ckpt.schedule, decode_steps, SamplingMode::Deterministic)?;
        err += (&back - &x).mapv(f64::abs).sum();
        count += x.len() as f64;
    }
    println!("reconstruction mean |err| / std = {:.4}", err / count);

    let embed = |idx: &[usize]| -> mdae::Result<Vec<Vec<f64>>> {
        idx.iter().map(|&i| embed_sequence(&data.sequences[i], &ckpt)).collect()
    };
    let train_z = embed(&train_idx)?;
    let metas: Vec<_> = train_idx.iter().map(|&i| data.manifest.entries[i].meta()).collect();
    let head_config = HeadConfig {
        weight_decay: knob("HEAD_DECAY", HeadConfig::default().weight_decay),
        ..HeadConfig::default()
    };
    let head = AttributeHead::train(&train_z, &metas, &head_config)?;
    let grade_mae: f64 = train_z
        .iter()
        .zip(&metas)
        .map(|(z, m)| head.predict(z).map(|p| (p.grade - m.grade_value()).abs()))
        .sum::<mdae::Result<f64>>()?
        / metas.len() as f64;
    println!("head train grade MAE {grade_mae:.3} |w_g| {:.2}", head.grade_weights.iter().map(|w| w * w).sum::<f64>().sqrt());
    let test_z = embed(&test_idx)?;
    let preds: Vec<_> = test_z.iter().map(|z| head.predict(z).map(|p| p.technique())).collect::<Result<_, _>>()?;
    let truths: Vec<_> = test_idx.iter().map(|&i| data.manifest.entries[i].technique).collect();
    let sep = confusion_and_uar(&preds, &truths, &classes)?;
    println!("UAR {:.3}", sep.uar);

    let (mut flipped, mut kept) = (0, 0);
    for (k, &i) in test_idx.iter().enumerate() {
        let before = head.predict(&test_z[k])?;
        let target = if before.technique() == Technique::LRK { Technique::HRK } else { Technique::LRK };
        let out = manipulate_motion(
            &data.sequences[i],
            &Targets {
                technique: Some(target),
                grade: None,
            },
            &ckpt,
            &head,
            &GuideOptions::default(),
            decode_steps,
        )?;
        let after = head.predict(&embed_sequence(&out.sequence, &ckpt)?)?;
        if std::env::var("VERBOSE").is_ok() {
            let enc = mdae::manipulate::encode_motion(&data.sequences[i], &ckpt, decode_steps)?;
            let plain = mdae::manipulate::decode_motion(&enc, &enc.z, &ckpt)?;
            let rt = head.predict(&embed_sequence(&plain, &ckpt)?)?;
            let zp = head.predict(&out.manipulation.z)?;
            println!(
                "truth {:.2} g {:.3} roundtrip {:.3} z' {:.3} {} after {:.3} {} λ {:.2}/{:.2}",
                data.manifest.entries[i].meta().grade_value(),
                before.grade,
                rt.grade,
                zp.grade,
                zp.technique(),
                after.grade,
                after.technique(),
                out.manipulation.lambda,
                out.manipulation.lambda_max
            );
        }
        flipped += usize::from(after.technique() == target);
        kept += usize::from((after.grade - before.grade).abs() < 0.1);
    }
    println!(
        "flipped {flipped}/{n} skill kept {kept}/{n} ({:.1}s total)",
        clock.elapsed().as_secs_f64(),
        n = test_idx.len()
    );
    Ok(())
}
