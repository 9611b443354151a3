use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, ensure, Context};
use clap::Args;
use mdae::diffusion::{NoiseSchedule, ScheduleKind};
use mdae::evaluate::{confusion_and_uar, fid, grade_mae, pca_project_2d, projection_csv};
use mdae::manipulate::{manipulate_motion, AttributeHead, GuideOptions, HeadConfig, LambdaSearch, Targets};
use mdae::motion::{
    contacts_or_derived, generate_synthetic_dataset, load_sequence, save_sequence, to_csv, DatasetManifest,
    Format, LimbSide, ManifestEntry, MotionSequence, Split, SynthConfig, Technique, Units,
};
use mdae::network::{
    load_checkpoint, save_checkpoint, Checkpoint, Dims, FeatureNorm, Model, OptimizerKind, TrainConfig, TrainSample,
    Trainer,
};
use mdae::pose::{
    anatomy_report, decode_sequence, encode_sequence, load_features, save_features, ChainFile, ChainTopology,
    Distances, PoseFeatures,
};
use mdae::preprocess::{
    center_to_origin, center_wand_markers, detect_outliers, downsample, mirror_left_to_right, rotate_to_facing,
    DEFAULT_Z_THRESH,
};
use serde::Serialize;

use crate::render::{Renderer, View};
use crate::table::{self, EmbeddingRow};
use crate::{Command, Globals};

pub fn run(command: Command, globals: Globals) -> anyhow::Result<()> {
    match command {
        Command::Prep(a) => prep(a),
        Command::Features(a) => features(a),
        Command::Coords(a) => coords(a),
        Command::CheckAnatomy(a) => check_anatomy(a),
        Command::Synth(a) => synth_cmd(a, globals),
        Command::Train(a) => train(a, globals),
        Command::Embed(a) => embed(a),
        Command::TrainHead(a) => train_head(a),
        Command::Manipulate(a) => manipulate(a),
        Command::EvalSeparability(a) => eval_separability(a),
        Command::EvalFid(a) => eval_fid(a),
        Command::Project(a) => project(a),
        Command::Render(a) => render(a),
    }
}

fn emit<T: Serialize>(value: &T, path: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn file_stem(path: &Path) -> anyhow::Result<String> {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .with_context(|| format!("{} has no file name", path.display()))
}

/// Options for reading a motion file; CSV carries neither rate nor units.
#[derive(Args, Debug, Clone)]
pub struct CsvOptions {
    /// Sampling rate of CSV input (Hz).
    #[arg(long, default_value_t = 25.0)]
    pub csv_rate: f64,
    #[arg(long, default_value = "m", value_parser = parse_units)]
    pub csv_units: Units,
}

fn parse_units(s: &str) -> Result<Units, String> {
    match s {
        "m" => Ok(Units::M),
        "mm" => Ok(Units::Mm),
        _ => Err(format!("unknown units `{s}` (m, mm)")),
    }
}

fn read_motion(path: &Path, csv: &CsvOptions) -> anyhow::Result<MotionSequence> {
    load_sequence(path, Format::from_path(path), csv.csv_rate, csv.csv_units)
        .with_context(|| format!("reading {}", path.display()))
}

fn write_motion(seq: &MotionSequence, path: &Path) -> anyhow::Result<()> {
    save_sequence(seq, path, Format::from_path(path)).with_context(|| format!("writing {}", path.display()))
}

fn is_features(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("mdaf"))
}

fn chain_without_distances(topology: &ChainTopology) -> ChainFile {
    ChainFile {
        root: topology.root().to_string(),
        links: topology.links().to_vec(),
        distances: None,
    }
}

fn encode_with(seq: &MotionSequence, chain: &ChainFile) -> anyhow::Result<PoseFeatures> {
    let topology = chain.topology()?;
    let distances = match &chain.distances {
        Some(d) => Distances::Provided(d),
        None => Distances::Measured,
    };
    Ok(encode_sequence(seq, &topology, distances)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameRange {
    pub start: usize,
    pub end: usize,
}

impl FromStr for FrameRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once(':').ok_or("expected start:end")?;
        let start = a.parse().map_err(|_| format!("bad start `{a}`"))?;
        let end = b.parse().map_err(|_| format!("bad end `{b}`"))?;
        if end <= start {
            return Err("end must be greater than start".into());
        }
        Ok(FrameRange { start, end })
    }
}

#[derive(Args, Debug)]
pub struct PrepArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Target sampling rate; the source rate must be a multiple.
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_Z_THRESH)]
    pub z_thresh: f64,
    /// Marker whose frame-0 horizontal position becomes the origin.
    #[arg(long)]
    pub root_marker: Option<String>,
    /// LEFT,RIGHT markers defining the body's facing.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub facing_markers: Vec<String>,
    /// JSON list of [left, right] names swapped when mirroring left-limb clips.
    #[arg(long)]
    pub mirror_pairs: Option<PathBuf>,
    /// JSON list of [neighbour, wand, neighbour] names.
    #[arg(long)]
    pub wand_triples: Option<PathBuf>,
    /// Keep source frames start..end (end exclusive) of every clip.
    #[arg(long)]
    pub trim: Option<FrameRange>,
    #[arg(long, default_value = "HEAD")]
    pub head_marker: String,
    /// Write the outlier report here instead of stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn prep(a: PrepArgs) -> anyhow::Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let pairs: Vec<(String, String)> = match &a.mirror_pairs {
        Some(p) => read_json(p)?,
        None => Vec::new(),
    };
    let triples: Vec<(String, String, String)> = match &a.wand_triples {
        Some(p) => read_json(p)?,
        None => Vec::new(),
    };
    let facing = match a.facing_markers.as_slice() {
        [] => None,
        [l, r] => Some((l.clone(), r.clone())),
        _ => bail!("--facing-markers takes exactly two names"),
    };
    create_dir(&a.out_dir)?;

    let mut entries = Vec::with_capacity(manifest.entries.len());
    let mut processed = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let path = manifest.resolve(entry);
        let mut seq = manifest.load_entry(entry).with_context(|| format!("reading {}", path.display()))?;
        if let Some(r) = a.trim {
            seq = seq.slice_frames(r.start, r.end.min(seq.frames()))?;
        }
        if let Some(rate) = a.rate {
            seq = downsample(&seq, rate)?;
        }
        if !triples.is_empty() {
            seq = center_wand_markers(&seq, &triples)?;
        }
        let mut side = entry.limb_side;
        if side == LimbSide::Left && !pairs.is_empty() {
            seq = mirror_left_to_right(&seq, &pairs)?;
            side = LimbSide::Right;
        }
        if let Some(root) = &a.root_marker {
            seq = center_to_origin(&seq, root)?;
        }
        if let Some((l, r)) = &facing {
            seq = rotate_to_facing(&seq, l, r)?;
        }
        let name = format!("{}.mdae", file_stem(&entry.path)?);
        write_motion(&seq, &a.out_dir.join(&name))?;
        entries.push(ManifestEntry {
            path: name.into(),
            limb_side: side,
            rate_hz: None,
            units: None,
            ..entry.clone()
        });
        processed.push(seq);
    }
    DatasetManifest::new(entries)?.save(&a.out_dir.join("manifest.json"))?;
    log::info!("wrote {} sequences to {}", processed.len(), a.out_dir.display());

    if processed.len() < 3 {
        log::warn!("outlier statistics need at least 3 sequences; report skipped");
        return Ok(());
    }
    let head = processed
        .iter()
        .all(|s| s.marker_index(&a.head_marker).is_ok())
        .then_some(a.head_marker.as_str());
    if head.is_none() {
        log::warn!("head marker `{}` missing; head-speed statistic skipped", a.head_marker);
    }
    let report = detect_outliers(&processed, a.z_thresh, head)?;
    for s in report.flagged() {
        log::warn!("{} flagged for {:?}", manifest.entries[s.index].path.display(), s.flags);
    }
    emit(&report, a.report.as_deref())
}

#[derive(Args, Debug)]
#[group(id = "source", required = true, multiple = false, args = ["manifest", "input"])]
pub struct FeaturesArgs {
    /// Dataset manifest; features go to --out-dir with a new manifest.
    #[arg(long, requires = "out_dir")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Single motion file; features go to --output.
    #[arg(long, requires = "output")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Chain JSON; stored distances, if any, replace measured ones.
    #[arg(long)]
    pub chain: PathBuf,
    #[command(flatten)]
    pub csv: CsvOptions,
}

fn features(a: FeaturesArgs) -> anyhow::Result<()> {
    let chain = ChainFile::load(&a.chain)?;
    if let (Some(input), Some(output)) = (&a.input, &a.output) {
        let f = encode_with(&read_motion(input, &a.csv)?, &chain)?;
        return Ok(save_features(&f, output)?);
    }
    let (Some(mpath), Some(out_dir)) = (&a.manifest, &a.out_dir) else {
        unreachable!("clap enforces the source group");
    };
    let manifest = DatasetManifest::load(mpath)?;
    create_dir(out_dir)?;
    let mut entries = Vec::new();
    for entry in &manifest.entries {
        let seq = manifest.load_entry(entry)?;
        let f = encode_with(&seq, &chain).with_context(|| format!("encoding {}", entry.path.display()))?;
        let name = format!("{}.mdaf", file_stem(&entry.path)?);
        save_features(&f, &out_dir.join(&name))?;
        entries.push(ManifestEntry {
            path: name.into(),
            rate_hz: None,
            units: None,
            ..entry.clone()
        });
    }
    DatasetManifest::new(entries)?.save(&out_dir.join("manifest.json"))?;
    log::info!("encoded {} sequences", manifest.entries.len());
    Ok(())
}

#[derive(Args, Debug)]
#[group(id = "source", required = true, multiple = false, args = ["manifest", "input"])]
pub struct CoordsArgs {
    /// Manifest of feature files; coordinates go to --out-dir.
    #[arg(long, requires = "out_dir")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Single feature file; coordinates go to --output (.csv or .mdae).
    #[arg(long, requires = "output")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Original motion (a file for --input, a manifest for --manifest) to
    /// report the round-trip error against.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[command(flatten)]
    pub csv: CsvOptions,
}

#[derive(Serialize, Default)]
struct RoundTrip {
    sequences: usize,
    /// Largest per-marker distance (m).
    max_error: f64,
    /// Mean per-marker distance (m).
    mean_error: f64,
}

impl RoundTrip {
    fn add(&mut self, decoded: &MotionSequence, reference: &MotionSequence) -> anyhow::Result<()> {
        ensure!(decoded.frames() == reference.frames(), "decoded and reference frame counts differ");
        let idx = decoded
            .markers()
            .iter()
            .map(|m| reference.marker_index(m))
            .collect::<mdae::Result<Vec<_>>>()?;
        let mut sum = 0.0;
        for f in 0..decoded.frames() {
            for (i, &j) in idx.iter().enumerate() {
                let e = (decoded.position(f, i) - reference.position(f, j)).norm();
                sum += e;
                self.max_error = self.max_error.max(e);
            }
        }
        let n = (decoded.frames() * idx.len()) as f64;
        self.mean_error = (self.mean_error * self.sequences as f64 + sum / n) / (self.sequences + 1) as f64;
        self.sequences += 1;
        Ok(())
    }
}

fn coords(a: CoordsArgs) -> anyhow::Result<()> {
    let mut report = RoundTrip::default();
    if let (Some(input), Some(output)) = (&a.input, &a.output) {
        let seq = decode_sequence(&load_features(input)?)?;
        write_motion(&seq, output)?;
        if let Some(r) = &a.reference {
            report.add(&seq, &read_motion(r, &a.csv)?)?;
            emit(&report, None)?;
        }
        return Ok(());
    }
    let (Some(mpath), Some(out_dir)) = (&a.manifest, &a.out_dir) else {
        unreachable!("clap enforces the source group");
    };
    let manifest = DatasetManifest::load(mpath)?;
    let reference = a.reference.as_deref().map(DatasetManifest::load).transpose()?;
    create_dir(out_dir)?;
    let mut entries = Vec::new();
    for (k, entry) in manifest.entries.iter().enumerate() {
        let seq = decode_sequence(&load_features(&manifest.resolve(entry))?)?;
        let name = format!("{}.mdae", file_stem(&entry.path)?);
        write_motion(&seq, &out_dir.join(&name))?;
        if let Some(r) = &reference {
            let e = r.entries.get(k).context("reference manifest is shorter")?;
            report.add(&seq, &r.load_entry(e)?)?;
        }
        entries.push(ManifestEntry {
            path: name.into(),
            ..entry.clone()
        });
    }
    DatasetManifest::new(entries)?.save(&out_dir.join("manifest.json"))?;
    if reference.is_some() {
        emit(&report, None)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct CheckAnatomyArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub chain: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn check_anatomy(a: CheckAnatomyArgs) -> anyhow::Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let topology = ChainFile::load(&a.chain)?.topology()?;
    let report = anatomy_report(&manifest.load_all()?, &topology)?;
    log::info!(
        "mean link-length std {:.4} m, mean reconstruction error {:.4} m",
        report.mean_distance_std,
        report.mean_round_trip_error
    );
    emit(&report, a.out.as_deref())
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "RP,FK,LRK,HRK,SBK")]
    pub techniques: Vec<Technique>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
    pub skills: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub per_cell: usize,
    #[arg(long, default_value_t = 100)]
    pub frames: usize,
    #[arg(long, default_value_t = 25.0)]
    pub rate: f64,
    #[arg(long, default_value_t = 5)]
    pub participants: usize,
    /// Std of per-frame link-length noise (m).
    #[arg(long, default_value_t = 0.0)]
    pub link_jitter: f64,
    #[arg(long, default_value_t = 0.08)]
    pub amplitude_jitter: f64,
}

fn synth_cmd(a: SynthArgs, g: Globals) -> anyhow::Result<()> {
    let config = SynthConfig {
        techniques: a.techniques,
        skills: a.skills,
        samples_per_cell: a.per_cell,
        frames: a.frames,
        rate: a.rate,
        participants: a.participants,
        link_jitter: a.link_jitter,
        amplitude_jitter: a.amplitude_jitter,
    };
    let data = generate_synthetic_dataset(&config, g.seed)?;
    create_dir(&a.out_dir)?;
    for (seq, entry) in data.sequences.iter().zip(&data.manifest.entries) {
        write_motion(seq, &a.out_dir.join(&entry.path))?;
    }
    data.manifest.save(&a.out_dir.join("manifest.json"))?;
    chain_without_distances(&data.chain).save(&a.out_dir.join("chain.json"))?;
    log::info!("wrote {} synthetic sequences to {}", data.sequences.len(), a.out_dir.display());
    Ok(())
}

/// Features and contacts of one manifest entry, from a motion file or a
/// stored feature file.
fn load_entry_features(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    chain: Option<&ChainFile>,
    feet: &[String],
) -> anyhow::Result<(PoseFeatures, Option<mdae::motion::ContactMask>)> {
    let path = manifest.resolve(entry);
    let (features, seq) = if is_features(&path) {
        let f = load_features(&path)?;
        let seq = decode_sequence(&f)?;
        (f, seq)
    } else {
        let seq = manifest.load_entry(entry).with_context(|| format!("reading {}", path.display()))?;
        let chain = chain.context("--chain is required for motion files")?;
        (encode_with(&seq, chain)?, seq)
    };
    let contacts = if feet.is_empty() {
        None
    } else {
        Some(contacts_or_derived(&seq, feet)?)
    };
    Ok((features, contacts))
}

fn parse_schedule(s: &str) -> Result<ScheduleKind, String> {
    s.parse().map_err(|e: mdae::Error| e.to_string())
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" | "sgd-momentum" => Ok(OptimizerKind::SgdMomentum),
        _ => Err(format!("unknown optimizer `{s}` (adam, sgd)")),
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Required when the manifest lists motion files.
    #[arg(long)]
    pub chain: Option<PathBuf>,
    /// Checkpoint written during and after training.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint's weights and optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Train on every entry instead of the train split only.
    #[arg(long)]
    pub all_splits: bool,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value = "adam", value_parser = parse_optimizer)]
    pub optimizer: OptimizerKind,
    #[arg(long, default_value_t = 50)]
    pub warmup: usize,
    #[arg(long, default_value_t = 1.0)]
    pub clip_norm: f64,
    #[arg(long, default_value_t = 1.0)]
    pub pos_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    pub foot_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    pub vel_weight: f64,
    #[arg(long, default_value = "cosine", value_parser = parse_schedule)]
    pub schedule: ScheduleKind,
    #[arg(long, default_value_t = 1000)]
    pub timesteps: usize,
    /// Substeps stored in the checkpoint for encode/decode.
    #[arg(long, default_value_t = 20)]
    pub decode_steps: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 128)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 32)]
    pub d_z: usize,
    /// Longest clip the model accepts (default: longest training clip).
    #[arg(long)]
    pub max_frames: Option<usize>,
    /// Foot markers for the contact loss; absent markers are skipped.
    #[arg(long, value_delimiter = ',', default_value = "LANK,RANK,LTOE,RTOE")]
    pub foot_markers: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
    /// Also save the checkpoint every N steps (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub save_every: usize,
}

fn train(a: TrainArgs, g: Globals) -> anyhow::Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let chain = a.chain.as_deref().map(ChainFile::load).transpose()?;
    let entries: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| a.all_splits || e.split == Split::Train)
        .collect();
    ensure!(!entries.is_empty(), "no training entries in {}", a.manifest.display());

    let resumed = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let known: Option<Vec<String>> = chain
        .as_ref()
        .map(|c| c.topology().map(|t| t.markers()))
        .transpose()?;
    let feet: Vec<String> = a
        .foot_markers
        .iter()
        .filter(|m| known.as_ref().is_none_or(|k| k.contains(m)))
        .cloned()
        .collect();
    if feet.is_empty() {
        log::warn!("no foot markers in the chain; the contact loss is inactive");
    }
    let loaded = entries
        .iter()
        .map(|e| load_entry_features(&manifest, e, chain.as_ref(), &feet))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let topology = loaded[0].0.chain().topology().clone();
    ensure!(
        loaded.iter().all(|(f, _)| f.chain().topology() == &topology),
        "entries use different chains"
    );

    let (model, schedule, config, step, moments) = match resumed {
        Some(ckpt) => {
            let config = TrainConfig {
                steps: a.steps,
                ..ckpt.config
            };
            (ckpt.model, ckpt.schedule, config, ckpt.step, ckpt.moments)
        }
        None => {
            let mats: Vec<_> = loaded.iter().map(|(f, _)| f.to_matrix()).collect();
            let norm = FeatureNorm::fit(&mats)?;
            let dims = Dims {
                feature_dim: loaded[0].0.feature_dim(),
                d_model: a.d_model,
                heads: a.heads,
                layers: a.layers,
                d_ff: a.d_ff,
                d_z: a.d_z,
                max_frames: a.max_frames.unwrap_or_else(|| mats.iter().map(|m| m.nrows()).max().unwrap_or(1)),
            };
            let config = TrainConfig {
                pos_weight: a.pos_weight,
                foot_weight: a.foot_weight,
                vel_weight: a.vel_weight,
                batch_size: a.batch_size,
                learning_rate: a.lr,
                steps: a.steps,
                seed: g.seed,
                optimizer: a.optimizer,
                clip_norm: Some(a.clip_norm),
                warmup_steps: a.warmup,
                ..TrainConfig::default()
            };
            let model = Model::new(dims, norm, g.seed)?;
            (model, NoiseSchedule::new(a.schedule, a.timesteps)?, config, 0, Vec::new())
        }
    };
    log::info!("{} training clips, {} parameters", loaded.len(), model.parameter_count());
    let norm = model.norm().clone();
    let samples = loaded
        .iter()
        .map(|(f, c)| TrainSample::new(f, c.as_ref(), &norm))
        .collect::<mdae::Result<Vec<_>>>()?;
    let mut trainer = if moments.is_empty() {
        let mut t = Trainer::new(model, config, schedule)?;
        if step > 0 {
            log::warn!("checkpoint has no optimizer state; moments restart from zero");
            t = Trainer::resume(t.model().clone(), t.config().clone(), t.schedule().clone(), step, t.moments())?;
        }
        t
    } else {
        Trainer::resume(model, config, schedule, step, moments)?
    };

    let chain_file = chain_without_distances(&topology);
    let save = |t: &Trainer| -> anyhow::Result<()> {
        let ckpt = Checkpoint {
            model: t.model().clone(),
            schedule: t.schedule().clone(),
            config: t.config().clone(),
            step: t.steps_done(),
            chain: Some(chain_file.clone()),
            decode_steps: a.decode_steps,
            moments: t.moments(),
        };
        save_checkpoint(&ckpt, &a.out).with_context(|| format!("writing {}", a.out.display()))
    };
    while trainer.steps_done() < a.steps {
        let r = trainer.step(&samples)?;
        if r.skipped {
            log::warn!("step {}: non-finite loss, update skipped", r.step);
        }
        if a.log_every > 0 && (r.step % a.log_every == 0 || r.step + 1 == a.steps) {
            log::info!(
                "{}",
                serde_json::json!({
                    "step": r.step,
                    "loss": r.loss,
                    "grad_norm": r.grad_norm,
                    "lr": r.learning_rate,
                })
            );
        }
        if a.save_every > 0 && trainer.steps_done() % a.save_every == 0 {
            save(&trainer)?;
        }
    }
    save(&trainer)?;
    log::info!("saved {} at step {}", a.out.display(), trainer.steps_done());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Only embed entries of this split.
    #[arg(long)]
    pub split: Option<Split>,
}

fn embed(a: EmbedArgs) -> anyhow::Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let chain = ckpt.chain.clone().context("checkpoint has no chain")?;
    let rows = manifest
        .entries
        .iter()
        .filter(|e| a.split.is_none_or(|s| e.split == s))
        .map(|e| {
            let (features, _) = load_entry_features(&manifest, e, Some(&chain), &[])?;
            let x = ckpt.model.norm().normalize(&features.to_matrix());
            let z = ckpt.model.semantic_encode(&x, x.nrows())?;
            Ok(EmbeddingRow {
                path: e.path.clone(),
                meta: e.meta(),
                split: e.split,
                z,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    table::save(&rows, &a.out)?;
    log::info!("embedded {} sequences", rows.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainHeadArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Rows used for fitting.
    #[arg(long, default_value = "train")]
    pub split: Split,
    #[arg(long, default_value_t = HeadConfig::default().iterations)]
    pub iterations: usize,
    #[arg(long, default_value_t = HeadConfig::default().learning_rate)]
    pub head_lr: f64,
    #[arg(long, default_value_t = HeadConfig::default().weight_decay)]
    pub weight_decay: f64,
}

fn train_head(a: TrainHeadArgs) -> anyhow::Result<()> {
    let rows: Vec<EmbeddingRow> = table::load(&a.embeddings)?
        .into_iter()
        .filter(|r| r.split == a.split)
        .collect();
    ensure!(!rows.is_empty(), "no {:?} rows in {}", a.split, a.embeddings.display());
    let zs: Vec<Vec<f64>> = rows.iter().map(|r| r.z.clone()).collect();
    let metas: Vec<_> = rows.iter().map(|r| r.meta.clone()).collect();
    let config = HeadConfig {
        iterations: a.iterations,
        learning_rate: a.head_lr,
        weight_decay: a.weight_decay,
    };
    let head = AttributeHead::train(&zs, &metas, &config)?;
    let correct = zs
        .iter()
        .zip(&metas)
        .filter(|(z, m)| head.predict(z).is_ok_and(|p| p.technique() == m.technique))
        .count();
    log::info!("head training accuracy {:.3}", correct as f64 / zs.len() as f64);
    head.save(&a.out)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct ManipulateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub target_technique: Option<Technique>,
    /// Target grade on the [0, 1] scale.
    #[arg(long)]
    pub target_grade: Option<f64>,
    #[arg(long, default_value_t = LambdaSearch::default().step)]
    pub lambda_step: f64,
    #[arg(long, default_value_t = LambdaSearch::default().eps_conv)]
    pub eps_conv: f64,
    #[arg(long, default_value_t = LambdaSearch::default().window)]
    pub window: usize,
    #[arg(long, default_value_t = LambdaSearch::default().cap)]
    pub lambda_cap: f64,
    #[arg(long, default_value_t = GuideOptions::default().grid)]
    pub grid: usize,
    /// Substeps for encode/decode (default: the checkpoint's).
    #[arg(long)]
    pub decode_steps: Option<usize>,
    /// Write the full λ score trace as JSON.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    #[command(flatten)]
    pub csv: CsvOptions,
}

#[derive(Serialize)]
struct ManipulationSummary {
    lambda: f64,
    lambda_max: f64,
    capped: bool,
    before: PredictionSummary,
    after: PredictionSummary,
}

#[derive(Serialize)]
struct PredictionSummary {
    technique: Technique,
    probs: [f64; 5],
    grade: f64,
}

impl From<mdae::manipulate::Prediction> for PredictionSummary {
    fn from(p: mdae::manipulate::Prediction) -> Self {
        PredictionSummary {
            technique: p.technique(),
            probs: p.probs,
            grade: p.grade,
        }
    }
}

fn manipulate(a: ManipulateArgs) -> anyhow::Result<()> {
    if a.target_technique.is_none() && a.target_grade.is_none() {
        bail!(mdae::Error::InvalidArgument(
            "give --target-technique and/or --target-grade".into()
        ));
    }
    let seq = read_motion(&a.input, &a.csv)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let head = AttributeHead::load(&a.head)?;
    let options = GuideOptions {
        search: LambdaSearch {
            step: a.lambda_step,
            eps_conv: a.eps_conv,
            window: a.window,
            cap: a.lambda_cap,
        },
        grid: a.grid,
    };
    let targets = Targets {
        technique: a.target_technique,
        grade: a.target_grade,
    };
    let steps = a.decode_steps.unwrap_or(ckpt.decode_steps);
    let out = manipulate_motion(&seq, &targets, &ckpt, &head, &options, steps)?;
    write_motion(&out.sequence, &a.output)?;
    let m = &out.manipulation;
    let first = &m.trace[0];
    let chosen = m
        .trace
        .iter()
        .find(|t| t.lambda == m.lambda)
        .unwrap_or(first);
    let summary = ManipulationSummary {
        lambda: m.lambda,
        lambda_max: m.lambda_max,
        capped: m.capped,
        before: PredictionSummary {
            technique: Technique::ALL[argmax(&first.probs)],
            probs: first.probs,
            grade: first.grade,
        },
        after: PredictionSummary {
            technique: Technique::ALL[argmax(&chosen.probs)],
            probs: chosen.probs,
            grade: chosen.grade,
        },
    };
    if let Some(p) = &a.trace_out {
        emit(&m.trace, Some(p))?;
    }
    emit(&summary, None)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i)
}

#[derive(Args, Debug)]
pub struct EvalSeparabilityArgs {
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Rows evaluated (default: all).
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct SeparabilityReport {
    samples: usize,
    classes: Vec<Technique>,
    /// Rows are true classes, columns predictions, both in RP, FK, LRK, HRK, SBK order.
    confusion: [[usize; 5]; 5],
    recalls: Vec<(Technique, f64)>,
    uar: f64,
    grade: mdae::evaluate::GradeMae,
}

fn eval_separability(a: EvalSeparabilityArgs) -> anyhow::Result<()> {
    let head = AttributeHead::load(&a.head)?;
    let rows: Vec<EmbeddingRow> = table::load(&a.embeddings)?
        .into_iter()
        .filter(|r| a.split.is_none_or(|s| r.split == s))
        .collect();
    ensure!(!rows.is_empty(), "no rows to evaluate");
    let preds = rows
        .iter()
        .map(|r| head.predict(&r.z))
        .collect::<mdae::Result<Vec<_>>>()?;
    let truths: Vec<Technique> = rows.iter().map(|r| r.meta.technique).collect();
    let classes: Vec<Technique> = Technique::ALL.into_iter().filter(|t| truths.contains(t)).collect();
    let sep = confusion_and_uar(&preds.iter().map(|p| p.technique()).collect::<Vec<_>>(), &truths, &classes)?;
    let grade = grade_mae(
        &preds.iter().map(|p| p.grade).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.meta.grade_value()).collect::<Vec<_>>(),
    )?;
    log::info!("UAR {:.3}, grade MAE {:.3}", sep.uar, grade.mae);
    emit(
        &SeparabilityReport {
            samples: rows.len(),
            classes,
            confusion: sep.confusion,
            recalls: sep.recalls,
            uar: sep.uar,
            grade,
        },
        a.out.as_deref(),
    )
}

#[derive(Args, Debug)]
pub struct EvalFidArgs {
    /// First embedding table.
    #[arg(long)]
    pub a: PathBuf,
    /// Second embedding table.
    #[arg(long)]
    pub b: PathBuf,
    /// Only compare rows of this technique.
    #[arg(long)]
    pub technique: Option<Technique>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn eval_fid(a: EvalFidArgs) -> anyhow::Result<()> {
    let codes = |path: &Path| -> anyhow::Result<Vec<Vec<f64>>> {
        Ok(table::load(path)?
            .into_iter()
            .filter(|r| a.technique.is_none_or(|t| r.meta.technique == t))
            .map(|r| r.z)
            .collect())
    };
    let report = fid(&codes(&a.a)?, &codes(&a.b)?)?;
    emit(&report, a.out.as_deref())
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Column used as the point label: technique, grade or path.
    #[arg(long, default_value = "technique")]
    pub label: String,
}

fn project(a: ProjectArgs) -> anyhow::Result<()> {
    let rows = table::load(&a.embeddings)?;
    let labels: Vec<String> = rows
        .iter()
        .map(|r| match a.label.as_str() {
            "technique" => Ok(r.meta.technique.to_string()),
            "grade" => Ok(r.meta.grade_index.to_string()),
            "path" => Ok(r.path.display().to_string()),
            other => bail!(mdae::Error::InvalidArgument(format!("unknown label column `{other}`"))),
        })
        .collect::<anyhow::Result<_>>()?;
    let proj = pca_project_2d(&rows.iter().map(|r| r.z.clone()).collect::<Vec<_>>())?;
    log::info!("component variances {:.4} {:.4}", proj.variances[0], proj.variances[1]);
    std::fs::write(&a.out, projection_csv(&labels, &proj)).with_context(|| format!("writing {}", a.out.display()))
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Chain JSON for drawing bones; markers only without it.
    #[arg(long)]
    pub chain: Option<PathBuf>,
    #[arg(long, default_value = "front")]
    pub view: View,
    /// Draw every N-th frame.
    #[arg(long, default_value_t = 1)]
    pub every: usize,
    #[command(flatten)]
    pub csv: CsvOptions,
}

fn render(a: RenderArgs) -> anyhow::Result<()> {
    ensure!(a.every > 0, "--every must be positive");
    let seq = if is_features(&a.input) {
        decode_sequence(&load_features(&a.input)?)?
    } else {
        read_motion(&a.input, &a.csv)?
    };
    let topology = a.chain.as_deref().map(|p| ChainFile::load(p)?.topology()).transpose()?;
    create_dir(&a.out_dir)?;
    std::fs::write(a.out_dir.join("markers.csv"), to_csv(&seq))?;
    let renderer = Renderer::new(&seq, topology.as_ref(), a.view)?;
    let mut written = 0;
    for f in (0..seq.frames()).step_by(a.every) {
        std::fs::write(a.out_dir.join(format!("frame_{f:04}.svg")), renderer.frame_svg(f))?;
        written += 1;
    }
    log::info!("rendered {written} frames to {}", a.out_dir.display());
    Ok(())
}
