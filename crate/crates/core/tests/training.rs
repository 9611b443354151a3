use mdae::diffusion::{NoiseSchedule, ScheduleKind};
use mdae::motion::{generate_synthetic_dataset, SynthConfig, Technique};
use mdae::network::{loss_total, Dims, FeatureNorm, Model, TrainConfig, TrainSample, Trainer};
use mdae::pose::{encode_sequence, Distances};

fn ten_samples() -> (Model, Vec<TrainSample>) {
    let data = generate_synthetic_dataset(
        &SynthConfig {
            techniques: vec![Technique::LRK, Technique::HRK],
            skills: vec![0.0, 1.0],
            samples_per_cell: 3,
            frames: 24,
            ..SynthConfig::default()
        },
        5,
    )
    .unwrap();
    let features: Vec<_> = data
        .sequences
        .iter()
        .take(10)
        .map(|s| encode_sequence(s, &data.chain, Distances::Measured).unwrap())
        .collect();
    let mats: Vec<_> = features.iter().map(|f| f.to_matrix()).collect();
    let norm = FeatureNorm::fit(mats.iter()).unwrap();
    let dims = Dims {
        d_model: 32,
        heads: 4,
        layers: 2,
        d_ff: 64,
        d_z: 8,
        max_frames: 24,
        ..Dims::new(mats[0].ncols())
    };
    let model = Model::new(dims, norm.clone(), 2).unwrap();
    let samples = features
        .iter()
        .zip(&data.sequences)
        .map(|(f, s)| TrainSample::new(f, s.contacts(), &norm).unwrap())
        .collect();
    (model, samples)
}

#[test]
fn two_thousand_steps_cut_the_loss_by_ninety_percent() {
    let (model, samples) = ten_samples();
    assert_eq!(samples.len(), 10);
    let config = TrainConfig {
        learning_rate: 2e-3,
        batch_size: 10,
        steps: 2000,
        ..TrainConfig::default()
    };
    let schedule = NoiseSchedule::new(ScheduleKind::Cosine, 1000).unwrap();
    let before = loss_total(&model, &samples, &config, &schedule, 17).unwrap().total;
    let mut trainer = Trainer::new(model, config.clone(), schedule.clone()).unwrap();
    let mut skipped = 0;
    for _ in 0..config.steps {
        skipped += usize::from(trainer.step(&samples).unwrap().skipped);
    }
    let after = loss_total(trainer.model(), &samples, &config, &schedule, 17).unwrap().total;
    assert_eq!(skipped, 0);
    assert!(after <= 0.1 * before, "loss {before} -> {after}");
}
