use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ksvs::dim_select::{apply_mask, select_from_pairs, DEFAULT_Z_THRESHOLD};
use ksvs::io_formats::{read_matrix, read_tensor, read_vector, write_tensor, CorpusManifest, SelectionMask, TensorData, MASK_MAGIC};
use ksvs::pitch_objective::{gradcheck, pitch_loss};
use ksvs::synthetic::{write_synthetic_corpus, SyntheticSpec};
use ksvs::trainer::{param_report, Checkpoint, Corpus, TrainConfig, Trainer};
use ksvs::{Error, ErrorClass};

#[derive(Parser)]
#[command(name = "ksvs", version, about = "SSL-conditioned singing voice synthesis toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Choose the SSL dimensions that separate speech from singing.
    SelectDims(SelectDims),
    /// Apply a selection mask to embeddings.
    Reduce(Reduce),
    /// Multi-resolution pitch loss between two contours.
    PitchLoss(PitchLoss),
    /// Verify analytic gradients against finite differences.
    Gradcheck(Gradcheck),
    /// Train the acoustic model, pitch head and discriminator.
    Train(Train),
    /// Generate a mel spectrogram from a checkpoint.
    Synth(Synth),
    /// Report parameter counts.
    Params(Params),
    /// Print the shape and summary statistics of a tensor or mask file.
    Inspect(Inspect),
    /// Write a small synthetic corpus with a manifest.
    MakeCorpus(MakeCorpus),
}

#[derive(Args)]
struct SelectDims {
    #[arg(long)]
    manifest: PathBuf,
    /// Output mask file.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-dimension TSV report.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_Z_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct Reduce {
    #[arg(long)]
    mask: PathBuf,
    /// Single embedding file to reduce.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    input: Option<PathBuf>,
    /// Reduce every utterance embedding listed in a manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output file (with --input) or directory (with --manifest).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PitchLoss {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    gen: PathBuf,
}

#[derive(Args)]
struct Gradcheck {
    /// What to check; only `pitch` is available.
    #[arg(value_parser = ["pitch"])]
    target: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    pairs: usize,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint directory, written at the end and every --save-every steps.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    /// Overrides the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    save_every: u64,
    #[arg(long, default_value_t = 50)]
    log_every: u64,
}

#[derive(Args)]
struct Synth {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    text: String,
    /// Reduced SSL embedding used for conditioning.
    #[arg(long)]
    embedding: PathBuf,
    /// Speaker name as listed in the training manifest.
    #[arg(long)]
    speaker: String,
    /// Output mel frames; defaults to twice the embedding frames.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Params {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 93)]
    embedding_dim: usize,
    #[arg(long, default_value_t = 1)]
    speakers: usize,
}

#[derive(Args)]
struct Inspect {
    file: PathBuf,
}

#[derive(Args)]
struct MakeCorpus {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    utterances: usize,
    #[arg(long, default_value_t = 2)]
    speakers: usize,
    #[arg(long, default_value_t = 8)]
    pairs: usize,
    #[arg(long, default_value_t = 48)]
    frames: usize,
    #[arg(long, default_value_t = 24)]
    embedding_dim: usize,
}

/// Fixed-point with nine decimals for ordinary magnitudes, otherwise
/// scientific with nine significant digits.
fn num(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-3..1e9).contains(&a) {
        format!("{x:.9}")
    } else {
        format!("{x:.8e}")
    }
}

enum Outcome {
    Done,
    CheckFailed,
}

type CmdResult = Result<Outcome, Error>;

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::SelectDims(a) => select_dims(a),
        Command::Reduce(a) => reduce(a),
        Command::PitchLoss(a) => {
            let to64 = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
            let gt = to64(read_vector(&a.gt)?);
            let gen = to64(read_vector(&a.gen)?);
            println!("{}", num(pitch_loss(&gt, &gen)?));
            Ok(Outcome::Done)
        }
        Command::Gradcheck(a) => {
            let r = gradcheck(a.seed, a.pairs, a.step, a.tolerance)?;
            println!(
                "{}: pairs {} checked {} failures {} max_rel_error {}",
                a.target,
                r.pairs,
                r.checked,
                r.failures,
                num(r.max_rel_error)
            );
            Ok(if r.passed() { Outcome::Done } else { Outcome::CheckFailed })
        }
        Command::Train(a) => train(a),
        Command::Synth(a) => synth(a),
        Command::Params(a) => params(a),
        Command::Inspect(a) => inspect(&a.file),
        Command::MakeCorpus(a) => {
            let spec = SyntheticSpec {
                utterances: a.utterances,
                speakers: a.speakers,
                frames: a.frames,
                frame_step: 4,
                embedding_dim: a.embedding_dim,
                pairs: a.pairs,
                seed: a.seed,
            };
            println!("{}", write_synthetic_corpus(&a.out, &spec)?.display());
            Ok(Outcome::Done)
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn select_dims(a: SelectDims) -> CmdResult {
    let manifest = CorpusManifest::read(&a.manifest)?;
    let mut loaded = Vec::with_capacity(manifest.parallel_pairs.len());
    for p in &manifest.parallel_pairs {
        loaded.push((
            p.speaker_id.as_str(),
            read_matrix(&p.speech_embedding_path)?,
            read_matrix(&p.singing_embedding_path)?,
        ));
    }
    if loaded.is_empty() {
        return Err(Error::Manifest {
            path: a.manifest,
            line: 0,
            msg: "no parallel pairs listed".into(),
        });
    }
    let report = select_from_pairs(loaded.iter().map(|(s, a, b)| (*s, a, b)), a.threshold)?;
    report.mask.write(&a.out)?;
    if let Some(path) = &a.report {
        write_text(path, &report.to_tsv())?;
    }
    println!(
        "selected {} of {} dims, reduction ratio {}",
        report.mask.len(),
        report.mask.original_dim(),
        num(report.reduction_ratio)
    );
    Ok(Outcome::Done)
}

fn reduce(a: Reduce) -> CmdResult {
    let mask = SelectionMask::read(&a.mask)?;
    if let Some(input) = &a.input {
        let reduced = apply_mask(&read_matrix(input)?, &mask)?;
        println!("{} x {}", reduced.rows(), reduced.cols());
        write_tensor(&a.out, &TensorData::Matrix(reduced))?;
        return Ok(Outcome::Done);
    }
    let manifest_path = a.manifest.expect("clap requires one source");
    let mut manifest = CorpusManifest::read(&manifest_path)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let absolute = |p: &Path| fs::canonicalize(p).map_err(|e| Error::io(p, e));
    for (i, e) in manifest.entries.iter_mut().enumerate() {
        let reduced = apply_mask(&read_matrix(&e.embedding_path)?, &mask)?;
        let name = PathBuf::from(format!("utt{i}.reduced.kse"));
        write_tensor(a.out.join(&name), &TensorData::Matrix(reduced))?;
        e.embedding_path = name;
        e.mel_path = absolute(&e.mel_path)?;
        e.pitch_path = absolute(&e.pitch_path)?;
    }
    for p in &mut manifest.parallel_pairs {
        p.speech_embedding_path = absolute(&p.speech_embedding_path)?;
        p.singing_embedding_path = absolute(&p.singing_embedding_path)?;
    }
    let out = a.out.join("manifest.tsv");
    write_text(&out, &manifest.to_tsv())?;
    println!("{}", out.display());
    Ok(Outcome::Done)
}

fn train(a: Train) -> CmdResult {
    let corpus = Corpus::from_manifest(&CorpusManifest::read(&a.manifest)?)?;
    let mut trainer = match &a.resume {
        Some(dir) => Trainer::load(dir, corpus)?,
        None => {
            let mut cfg = TrainConfig::read(&a.config)?;
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            Trainer::new(cfg, corpus)?
        }
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut log = String::from("step\tl_mel\tl_mmd\tl_mi\tl_pitch\tl_pitch_g\tl_pitch_repr\tl_d\ttotal\td_loss\n");
    let end = trainer.step + a.steps;
    while trainer.step < end {
        let r = trainer.train_step()?;
        let l = &r.losses;
        let d = r.disc_objective.map_or("-".to_string(), num);
        let _ = writeln!(
            log,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.step,
            num(l.l_mel),
            num(l.l_mmd),
            num(l.l_mi),
            num(l.l_pitch),
            num(l.l_pitch_g),
            num(l.l_pitch_repr),
            num(l.l_d),
            num(l.total),
            d
        );
        if a.log_every > 0 && (r.step % a.log_every == 0 || trainer.step == end) {
            println!("step {} total {} l_mel {} d_loss {}", r.step, num(l.total), num(l.l_mel), d);
        }
        if a.save_every > 0 && trainer.step % a.save_every == 0 {
            trainer.save(&a.out)?;
        }
    }
    trainer.save(&a.out)?;
    write_text(&a.out.join("losses.tsv"), &log)?;
    Ok(Outcome::Done)
}

fn synth(a: Synth) -> CmdResult {
    let meta = Checkpoint::read_meta(&a.checkpoint)?;
    let cfg = TrainConfig::read(a.checkpoint.join("config.cfg"))?;
    let speaker = meta
        .speakers
        .iter()
        .position(|s| *s == a.speaker)
        .ok_or_else(|| Error::UnknownSpeaker(a.speaker.clone()))?;
    let emb = read_matrix(&a.embedding)?;
    let generator = Trainer::load_generator(&a.checkpoint, &cfg, &meta)?;
    let frames = a.frames.unwrap_or(2 * emb.rows());
    let mel = generator.synthesize(&a.text, &emb, speaker, frames)?;
    println!("{} x {}", mel.rows(), mel.cols());
    write_tensor(&a.out, &TensorData::Matrix(mel))?;
    Ok(Outcome::Done)
}

fn params(a: Params) -> CmdResult {
    let cfg = match &a.config {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::default(),
    };
    let r = param_report(&cfg.model, a.embedding_dim, a.speakers)?;
    println!("consumer\t{}", r.consumer);
    println!("acoustic\t{}", r.acoustic);
    println!("speakers\t{}", r.speakers);
    println!("pitch\t{}", r.pitch);
    println!("generator_total\t{}", r.generator_total());
    println!("discriminator\t{}", r.discriminator);
    Ok(Outcome::Done)
}

fn inspect(path: &Path) -> CmdResult {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MASK_MAGIC) {
        let mask = SelectionMask::decode(&bytes, path)?;
        println!("mask {} of {}", mask.len(), mask.original_dim());
        let idx: Vec<String> = mask.indices().iter().map(usize::to_string).collect();
        println!("indices {}", idx.join(","));
        return Ok(Outcome::Done);
    }
    let t = read_tensor(path)?;
    let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
    println!("shape {}", shape.join(" x "));
    let v = t.values();
    if !v.is_empty() {
        let n = v.len() as f64;
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let min = v.iter().copied().fold(f32::INFINITY, f32::min);
        let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        println!("min {}", num(min as f64));
        println!("max {}", num(max as f64));
        println!("mean {}", num(mean));
        println!("std {}", num(var.sqrt()));
        println!("nonfinite {}", v.iter().filter(|x| !x.is_finite()).count());
    }
    Ok(Outcome::Done)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Validation => 1,
                ErrorClass::Check => 2,
                ErrorClass::Io => 3,
            })
        }
    }
}
