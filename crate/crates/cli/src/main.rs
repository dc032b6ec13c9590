//! `badm`: data synthesis, beat extraction, training, generation, editing and
//! evaluation for bidirectional autoregressive dance diffusion.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use badm::conditioning::{beat_indices, extract_beats, synth_features, Condition, FeatureSpec};
use badm::config::RunConfig;
use badm::corpus::{make_synthetic_corpus, CorpusSpec};
use badm::diffusion::{
    chunks_needed, generate_long, long_form_len, make_schedule, sample, DiffusionSchedule, EditMask,
};
use badm::io::{
    load_beats, load_condition, load_features, load_motion, read_dataset, read_motion_dir, read_wav, save_beats,
    save_features, save_motion, save_motion_bdt, write_bytes, write_dataset, Checkpoint, MaskSpec, Provenance,
};
use badm::metrics::{evaluate_sets, seam_report, BEAT_ALIGN_SIGMA};
use badm::motion::{MotionSequence, Skeleton};
use badm::train::{validate_dataset, EpochLog, Trainer};
use badm::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "badm",
    version,
    about = "Music-driven dance generation with bidirectional autoregressive diffusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic beat-locked corpus.
    MakeData(MakeDataArgs),
    /// Detect beats in a WAV file and optionally write procedural features.
    ExtractBeats(ExtractBeatsArgs),
    /// Train a denoiser on a dataset directory.
    Train(TrainArgs),
    /// Sample one motion for a feature and beat file.
    Generate(GenerateArgs),
    /// Sample overlapping windows and stitch them into a longer motion.
    GenerateLong(GenerateLongArgs),
    /// Sample with part of a known motion held fixed.
    Edit(EditArgs),
    /// Compute diversity, beat alignment, foot contact and FID.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct MakeDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Run config JSON; its model slice count and feature width apply.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 150)]
    frames: usize,
    #[arg(long, default_value_t = 30)]
    fps: u32,
    #[arg(long, default_value_t = 90.0)]
    bpm_min: f64,
    #[arg(long, default_value_t = 140.0)]
    bpm_max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExtractBeatsArgs {
    #[arg(long)]
    audio: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    fps: u32,
    /// Output length in frames; defaults to the audio duration.
    #[arg(long)]
    frames: Option<usize>,
    /// Also write procedural features driven by the detected beats.
    #[arg(long)]
    features_out: Option<PathBuf>,
    #[arg(long, default_value_t = 35)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the loss curve.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config (default 200).
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides the config (default 16).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Overrides the config (default 2e-4).
    #[arg(long)]
    lr: Option<f64>,
    /// Overrides the config (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Also save `epoch_XXXX.bdck` every this many epochs (0 = never).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Worker threads for per-item gradients; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    beats: PathBuf,
    /// Guidance weight (default from the checkpoint's config, normally 2).
    #[arg(long)]
    guidance: Option<f64>,
    /// Retained sampling steps (default from the checkpoint's config, normally 50).
    #[arg(long)]
    ddim_steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the motion as a binary tensor file.
    #[arg(long)]
    bdt: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    sample: SampleArgs,
}

#[derive(Args)]
struct GenerateLongArgs {
    #[command(flatten)]
    sample: SampleArgs,
    /// Output length in frames; defaults to the longest length the features cover.
    #[arg(long, conflicts_with = "seconds")]
    frames: Option<usize>,
    #[arg(long)]
    seconds: Option<f64>,
}

#[derive(Args)]
struct EditArgs {
    #[command(flatten)]
    sample: SampleArgs,
    /// Motion JSON providing the fixed values.
    #[arg(long)]
    known: PathBuf,
    /// Mask JSON: {frames: [[start, end)...], joints: [...], include_root, include_contacts}.
    #[arg(long)]
    mask: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of generated `*.motion.json` files.
    #[arg(long)]
    generated: PathBuf,
    /// Directory of reference `*.motion.json` files.
    #[arg(long)]
    reference: PathBuf,
    /// Directory holding `<name>.beats.json` for each generated `<name>.motion.json`
    /// (defaults to the generated directory).
    #[arg(long)]
    beats: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = BEAT_ALIGN_SIGMA)]
    sigma: f64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::NumericFailure(_) | Error::DegenerateRotation(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeData(a) => make_data(a),
        Command::ExtractBeats(a) => extract(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::GenerateLong(a) => generate_long_cmd(a),
        Command::Edit(a) => edit(a),
        Command::Evaluate(a) => evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config types serialize")
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn make_data(a: MakeDataArgs) -> Result<()> {
    let mut config = base_config(a.config.as_deref())?;
    config.n_frames = a.frames;
    config.fps = a.fps;
    config.seed = a.seed;
    config.validate()?;
    let spec = CorpusSpec {
        count: a.count,
        n_frames: a.frames,
        fps: a.fps,
        bpm_min: a.bpm_min,
        bpm_max: a.bpm_max,
        feature_dim: config.model.feature_dim,
        seed: a.seed,
    };
    let items = make_synthetic_corpus(&spec, &Skeleton::smpl24())?;
    let prov = Provenance::new("make-data", a.seed, to_value(&spec));
    write_dataset(&a.out, &items, &prov)?;
    println!("wrote {} items to {} (seed {})", items.len(), a.out.display(), a.seed);
    Ok(())
}

fn extract(a: ExtractBeatsArgs) -> Result<()> {
    let (pcm, rate) = read_wav(&a.audio)?;
    let frames = a
        .frames
        .unwrap_or_else(|| (pcm.len() as u64 * a.fps as u64 / rate.max(1) as u64) as usize);
    let beat = extract_beats(&pcm, rate, a.fps, frames)?;
    let beats = beat_indices(&beat);
    save_beats(&a.out, &beats, frames, a.fps)?;
    println!("{} beats in {frames} frames -> {}", beats.len(), a.out.display());
    if let Some(path) = a.features_out {
        let spec = FeatureSpec {
            dim: a.feature_dim,
            seed: a.seed,
            fps: a.fps,
        };
        let music = synth_features(&spec, &beat)?;
        let cond = Condition::new(frames, a.feature_dim, music, beat)?;
        save_features(&path, &cond, a.fps)?;
        println!("features -> {} (seed {})", path.display(), a.seed);
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut config = base_config(a.config.as_deref())?;
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.lr {
        config.optimizer.lr = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    let data = read_dataset(&a.data)?;
    config.n_frames = validate_dataset(&data, &config.model)?;
    config.fps = data[0].motion.fps;
    config.validate()?;

    let skeleton = Arc::new(Skeleton::smpl24());
    let model = badm::denoiser::Denoiser::new(config.model.clone(), config.seed)?;
    let mut trainer = Trainer::new(config.train_config(), model, skeleton)?.with_jobs(a.jobs);
    let prov = Provenance::new("train", config.seed, to_value(&config));
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let csv_path = a.out.join("loss.csv");
    let mut csv = format!("{}\n", EpochLog::CSV_HEADER);
    let mut best = f64::INFINITY;
    for _ in 0..config.epochs {
        let log = trainer.run_epoch(&data)?;
        csv.push_str(&log.csv_row());
        csv.push('\n');
        write_bytes(&csv_path, csv.as_bytes())?;
        let ck = Checkpoint {
            model: trainer.model.clone(),
            provenance: prov.clone(),
        };
        ck.save(&a.out.join("last.bdck"))?;
        if log.total < best {
            best = log.total;
            ck.save(&a.out.join("best.bdck"))?;
        }
        if a.checkpoint_every > 0 && log.epoch % a.checkpoint_every == 0 {
            ck.save(&a.out.join(format!("epoch_{:04}.bdck", log.epoch)))?;
        }
        println!(
            "epoch {} L_simple {:.6} L_pos {:.6} L_vel {:.6} L_foot {:.6} total {:.6}",
            log.epoch, log.simple, log.pos, log.vel, log.foot, log.total
        );
        let _ = std::io::stdout().flush();
    }
    println!("seed {}; checkpoints in {}", config.seed, a.out.display());
    Ok(())
}

/// Checkpoint plus the run config it was trained with.
struct Loaded {
    checkpoint: Checkpoint,
    config: RunConfig,
    schedule: DiffusionSchedule,
}

fn load_model(s: &SampleArgs) -> Result<Loaded> {
    let checkpoint = Checkpoint::load(&s.ckpt)?;
    let mut config: RunConfig =
        serde_json::from_value(checkpoint.provenance.config.clone()).map_err(|e| Error::Format {
            path: s.ckpt.clone(),
            message: format!("provenance config: {e}"),
        })?;
    config.model = checkpoint.model.config.clone();
    if let Some(w) = s.guidance {
        config.guidance = w;
    }
    if let Some(d) = s.ddim_steps {
        config.ddim_steps = d;
    }
    config.seed = s.seed;
    config.validate()?;
    let schedule = make_schedule(config.diffusion_steps, config.schedule)?;
    Ok(Loaded {
        checkpoint,
        config,
        schedule,
    })
}

/// Loads features and beats and checks them against the model's window.
fn load_window_condition(s: &SampleArgs, config: &RunConfig) -> Result<Condition> {
    let cond = load_condition(&s.features, &s.beats, config.fps)?;
    let features = load_features(&s.features, config.fps)?;
    if features.fps != config.fps {
        return Err(Error::ShapeMismatch(format!(
            "{} is at {} fps but the checkpoint was trained at {} fps",
            s.features.display(),
            features.fps,
            config.fps
        )));
    }
    if cond.feature_dim != config.model.feature_dim {
        return Err(Error::ShapeMismatch(format!(
            "{} has {} feature channels but the checkpoint expects {}",
            s.features.display(),
            cond.feature_dim,
            config.model.feature_dim
        )));
    }
    Ok(cond)
}

fn check_frames(s: &SampleArgs, cond: &Condition, config: &RunConfig) -> Result<()> {
    if cond.n_frames != config.n_frames {
        return Err(Error::ShapeMismatch(format!(
            "{} has {} frames but the checkpoint window is {} frames",
            s.features.display(),
            cond.n_frames,
            config.n_frames
        )));
    }
    Ok(())
}

fn write_outputs(s: &SampleArgs, motion: &MotionSequence, command: &str, config: &RunConfig) -> Result<()> {
    let mut prov_config = to_value(config);
    prov_config["checkpoint"] = serde_json::Value::String(s.ckpt.display().to_string());
    let prov = Provenance::new(command, s.seed, prov_config);
    save_motion(&s.out, motion, Some(prov))?;
    if let Some(b) = &s.bdt {
        save_motion_bdt(b, motion)?;
    }
    println!("{} frames -> {} (seed {})", motion.len(), s.out.display(), s.seed);
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let l = load_model(&a.sample)?;
    let cond = load_window_condition(&a.sample, &l.config)?;
    check_frames(&a.sample, &cond, &l.config)?;
    let motion = sample(
        &l.checkpoint.model,
        &cond,
        &l.schedule,
        &l.config.sample_config(),
        None,
        l.config.fps,
    )?;
    write_outputs(&a.sample, &motion, "generate", &l.config)
}

fn generate_long_cmd(a: GenerateLongArgs) -> Result<()> {
    let l = load_model(&a.sample)?;
    let cond = load_window_condition(&a.sample, &l.config)?;
    let window = l.config.n_frames;
    let frames = match (a.frames, a.seconds) {
        (Some(f), _) => f,
        (None, Some(s)) => (s * l.config.fps as f64).round() as usize,
        (None, None) => {
            // longest stitched length the features cover
            let mut c = chunks_needed(cond.n_frames, window);
            while c > 1 && long_form_len(c, window) > cond.n_frames {
                c -= 1;
            }
            long_form_len(c, window).min(cond.n_frames)
        }
    };
    let long = generate_long(
        &l.checkpoint.model,
        &cond,
        &l.schedule,
        &l.config.sample_config(),
        window,
        frames,
        l.config.fps,
    )?;
    if long.chunks.len() > 1 && long.motion.len() > window / 2 {
        let seams = seam_report(&long.motion, &long.chunks, window, &Skeleton::smpl24())?;
        println!(
            "{} chunks; max seam delta {:.4} m, max intra-chunk delta {:.4} m",
            long.chunks.len(),
            seams.max_seam_delta,
            seams.max_intra_delta
        );
    }
    write_outputs(&a.sample, &long.motion, "generate-long", &l.config)
}

fn edit(a: EditArgs) -> Result<()> {
    let l = load_model(&a.sample)?;
    let cond = load_window_condition(&a.sample, &l.config)?;
    check_frames(&a.sample, &cond, &l.config)?;
    let known = load_motion(&a.known)?;
    if known.len() != cond.n_frames {
        return Err(Error::ShapeMismatch(format!(
            "{} has {} frames but {} has {}",
            a.known.display(),
            known.len(),
            a.sample.features.display(),
            cond.n_frames
        )));
    }
    let mask = MaskSpec::load(&a.mask)?.expand(cond.n_frames)?;
    let edit = if mask.iter().any(|&m| m != 0.0) {
        Some(EditMask::new(mask, known.to_flat())?)
    } else {
        None
    };
    let motion = sample(
        &l.checkpoint.model,
        &cond,
        &l.schedule,
        &l.config.sample_config(),
        edit.as_ref(),
        l.config.fps,
    )?;
    write_outputs(&a.sample, &motion, "edit", &l.config)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let generated = read_motion_dir(&a.generated)?;
    let reference = read_motion_dir(&a.reference)?;
    let beat_dir = a.beats.clone().unwrap_or_else(|| a.generated.clone());
    let beats = generated
        .iter()
        .map(|(name, _)| {
            let stem = name.trim_end_matches(".motion.json");
            Ok(load_beats(&beat_dir.join(format!("{stem}.beats.json")))?.beats)
        })
        .collect::<Result<Vec<_>>>()?;
    let gen: Vec<MotionSequence> = generated.into_iter().map(|(_, m)| m).collect();
    let refs: Vec<MotionSequence> = reference.into_iter().map(|(_, m)| m).collect();
    let report = evaluate_sets(&gen, &beats, &refs, &Skeleton::smpl24(), a.sigma, a.jobs)?;
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    write_bytes(&a.out, text.as_bytes())?;
    print!("{text}");
    for (metric, err) in &report.errors {
        eprintln!("warning: {metric}: {err}");
    }
    Ok(())
}
