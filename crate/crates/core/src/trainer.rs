//! Training loop: loss composition, activation schedule, learning rates,
//! the per-step generator/discriminator updates and checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::acoustic::{encoder_summary, text_to_ids, AcousticConfig, AcousticModel, GeneratorOutput, PositionMode};
use crate::conditioning::{mi_loss, mmd_loss, standard_normal, ConsumerConfig, SslConsumer};
use crate::discriminator::{
    disc_loss, generator_score, sample_slice, shuffled, DiscConfig, SpectralState, UNetDiscriminator,
};
use crate::error::{Error, Result};
use crate::io_formats::{read_matrix, read_vector, write_tensor, CorpusManifest, Matrix, TensorData, MEL_BANDS};
use crate::nn::{fnv1a, scalar, stream_rng, Adam, Init, ParamStore};
use crate::pitch_objective::{normalize_pitch, pitch_loss_rows};
use crate::pitch_predictor::{repr_loss, PitchPredictor, PitchPredictorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Thresholds {
    pub pitch_gen: u64,
    pub disc_learn: u64,
    pub disc_active: u64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            pitch_gen: 100_000,
            disc_learn: 150_000,
            disc_active: 250_000,
        }
    }
}

/// Per-term switches for ablations. A disabled term is reported as 0 and
/// contributes no gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terms {
    pub mel: bool,
    pub mmd: bool,
    pub mi: bool,
    pub pitch: bool,
    pub pitch_g: bool,
    pub pitch_repr: bool,
    pub adv: bool,
}

const TERM_NAMES: [&str; 7] = ["mel", "mmd", "mi", "pitch", "pitch_g", "pitch_repr", "adv"];

impl Terms {
    pub fn all() -> Self {
        Self::from_fn(|_| true)
    }

    pub fn none() -> Self {
        Self::from_fn(|_| false)
    }

    fn from_fn(f: impl Fn(&str) -> bool) -> Self {
        Self {
            mel: f("mel"),
            mmd: f("mmd"),
            mi: f("mi"),
            pitch: f("pitch"),
            pitch_g: f("pitch_g"),
            pitch_repr: f("pitch_repr"),
            adv: f("adv"),
        }
    }

    fn flags(&self) -> [bool; 7] {
        [self.mel, self.mmd, self.mi, self.pitch, self.pitch_g, self.pitch_repr, self.adv]
    }

    pub fn parse(list: &str) -> Result<Self> {
        let list = list.trim();
        if list == "all" {
            return Ok(Self::all());
        }
        if list == "none" {
            return Ok(Self::none());
        }
        let names: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if let Some(bad) = names.iter().find(|n| !TERM_NAMES.contains(n)) {
            return Err(Error::Config(format!("unknown loss term {bad:?}")));
        }
        Ok(Self::from_fn(|n| names.contains(&n)))
    }

    pub fn render(&self) -> String {
        let on: Vec<&str> = TERM_NAMES
            .iter()
            .zip(self.flags())
            .filter(|(_, f)| *f)
            .map(|(n, _)| *n)
            .collect();
        match on.len() {
            0 => "none".into(),
            7 => "all".into(),
            _ => on.join(","),
        }
    }
}

/// Architecture knobs for every network in the stack. The consumer's input
/// width is taken from the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub consumer: ConsumerConfig,
    pub acoustic: AcousticConfig,
    pub pitch: PitchPredictorConfig,
    pub disc: DiscConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            consumer: ConsumerConfig::default(),
            acoustic: AcousticConfig::default(),
            pitch: PitchPredictorConfig::default(),
            disc: DiscConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta: f64,
    pub kappa: f64,
    pub lambda_g: f64,
    pub batch_size: usize,
    pub thresholds: Thresholds,
    pub lr: f64,
    pub gen_halving_period: u64,
    pub disc_gamma: f64,
    pub disc_step_size: u64,
    pub seed: u64,
    /// Divides thresholds and learning-rate periods for short runs.
    pub scale_factor: u64,
    pub terms: Terms,
    /// When false the adversarial term is computed on a detached fake batch.
    pub adv_grad: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            kappa: 10_000.0,
            lambda_g: 100.0,
            batch_size: 16,
            thresholds: Thresholds::default(),
            lr: 1e-3,
            gen_halving_period: 100_000,
            disc_gamma: 0.1,
            disc_step_size: 100_000,
            seed: 0,
            scale_factor: 1,
            terms: Terms::all(),
            adv_grad: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small widths and thresholds scaled by 1000, for runs of a few
    /// hundred steps on a CPU.
    pub fn desk() -> Self {
        let mut cfg = Self {
            scale_factor: 1000,
            ..Self::default()
        };
        for (k, v) in [
            ("consumer_channels", "16"),
            ("enc_dim", "32"),
            ("dec_dim", "32"),
            ("postnet_channels", "32"),
            ("pitch_dim", "32"),
            ("pitch_ff", "64"),
            ("pitch_layers", "2"),
            ("disc_channels", "8"),
            ("slice_len", "32"),
        ] {
            cfg.set(k, v).expect("known key");
        }
        cfg
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "beta" => self.beta = parse_num(key, v)?,
            "kappa" => self.kappa = parse_num(key, v)?,
            "lambda_g" => self.lambda_g = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "pitch_gen_threshold" => self.thresholds.pitch_gen = parse_num(key, v)?,
            "disc_learn_threshold" => self.thresholds.disc_learn = parse_num(key, v)?,
            "disc_active_threshold" => self.thresholds.disc_active = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "gen_halving_period" => self.gen_halving_period = parse_num(key, v)?,
            "disc_gamma" => self.disc_gamma = parse_num(key, v)?,
            "disc_step_size" => self.disc_step_size = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "scale_factor" => self.scale_factor = parse_num(key, v)?,
            "terms" => self.terms = Terms::parse(v)?,
            "adv_grad" => self.adv_grad = parse_bool(key, v)?,
            "speaker_dim" => {
                m.consumer.speaker_dim = parse_num(key, v)?;
                m.acoustic.speaker_dim = m.consumer.speaker_dim;
            }
            "global_dim" => {
                m.consumer.global_dim = parse_num(key, v)?;
                m.acoustic.global_dim = m.consumer.global_dim;
            }
            "consumer_channels" => {
                m.consumer.channels = parse_num(key, v)?;
                m.acoustic.cond_channels = m.consumer.channels;
            }
            "consumer_blocks" => m.consumer.blocks = parse_num(key, v)?,
            "consumer_narrow_blocks" => m.consumer.narrow_blocks = parse_num(key, v)?,
            "consumer_kernel" => m.consumer.wide_kernel = parse_num(key, v)?,
            "proj_dim" => m.consumer.proj_dim = parse_num(key, v)?,
            "enc_dim" => m.acoustic.enc_dim = parse_num(key, v)?,
            "dec_dim" => m.acoustic.dec_dim = parse_num(key, v)?,
            "enc_blocks" => m.acoustic.enc_blocks = parse_num(key, v)?,
            "dec_blocks" => m.acoustic.dec_blocks = parse_num(key, v)?,
            "kernel" => m.acoustic.kernel = parse_num(key, v)?,
            "postnet_channels" => m.acoustic.postnet_channels = parse_num(key, v)?,
            "postnet_layers" => m.acoustic.postnet_layers = parse_num(key, v)?,
            "position" => {
                m.acoustic.position = match v {
                    "rotary" => PositionMode::Rotary,
                    "additive" => PositionMode::Additive,
                    _ => return Err(Error::Config(format!("position: expected rotary or additive, got {v:?}"))),
                }
            }
            "pitch_dim" => m.pitch.dim = parse_num(key, v)?,
            "pitch_layers" => m.pitch.layers = parse_num(key, v)?,
            "pitch_ff" => m.pitch.ff_dim = parse_num(key, v)?,
            "pitch_heads" => m.pitch.heads = parse_num(key, v)?,
            "pitch_kernel" => m.pitch.conv_kernel = parse_num(key, v)?,
            "disc_channels" => m.disc.base_channels = parse_num(key, v)?,
            "disc_depth" => m.disc.depth = parse_num(key, v)?,
            "disc_dropout" => m.disc.dropout = parse_num(key, v)?,
            "slice_len" => m.disc.slice_len = parse_num(key, v)?,
            "real_as_fake" => m.disc.real_as_fake = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Flat `key = value` rendering that [`TrainConfig::parse`] reads back exactly.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let position = match m.acoustic.position {
            PositionMode::Rotary => "rotary",
            PositionMode::Additive => "additive",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("beta", self.beta.to_string()),
            ("kappa", self.kappa.to_string()),
            ("lambda_g", self.lambda_g.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("pitch_gen_threshold", self.thresholds.pitch_gen.to_string()),
            ("disc_learn_threshold", self.thresholds.disc_learn.to_string()),
            ("disc_active_threshold", self.thresholds.disc_active.to_string()),
            ("lr", self.lr.to_string()),
            ("gen_halving_period", self.gen_halving_period.to_string()),
            ("disc_gamma", self.disc_gamma.to_string()),
            ("disc_step_size", self.disc_step_size.to_string()),
            ("seed", self.seed.to_string()),
            ("scale_factor", self.scale_factor.to_string()),
            ("terms", self.terms.render()),
            ("adv_grad", self.adv_grad.to_string()),
            ("speaker_dim", m.consumer.speaker_dim.to_string()),
            ("global_dim", m.consumer.global_dim.to_string()),
            ("consumer_channels", m.consumer.channels.to_string()),
            ("consumer_blocks", m.consumer.blocks.to_string()),
            ("consumer_narrow_blocks", m.consumer.narrow_blocks.to_string()),
            ("consumer_kernel", m.consumer.wide_kernel.to_string()),
            ("proj_dim", m.consumer.proj_dim.to_string()),
            ("enc_dim", m.acoustic.enc_dim.to_string()),
            ("dec_dim", m.acoustic.dec_dim.to_string()),
            ("enc_blocks", m.acoustic.enc_blocks.to_string()),
            ("dec_blocks", m.acoustic.dec_blocks.to_string()),
            ("kernel", m.acoustic.kernel.to_string()),
            ("postnet_channels", m.acoustic.postnet_channels.to_string()),
            ("postnet_layers", m.acoustic.postnet_layers.to_string()),
            ("position", position.to_string()),
            ("pitch_dim", m.pitch.dim.to_string()),
            ("pitch_layers", m.pitch.layers.to_string()),
            ("pitch_ff", m.pitch.ff_dim.to_string()),
            ("pitch_heads", m.pitch.heads.to_string()),
            ("pitch_kernel", m.pitch.conv_kernel.to_string()),
            ("disc_channels", m.disc.base_channels.to_string()),
            ("disc_depth", m.disc.depth.to_string()),
            ("disc_dropout", m.disc.dropout.to_string()),
            ("slice_len", m.disc.slice_len.to_string()),
            ("real_as_fake", m.disc.real_as_fake.to_string()),
        ];
        pairs.iter().fold(String::new(), |mut out, (k, v)| {
            let _ = writeln!(out, "{k} = {v}");
            out
        })
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.thresholds;
        if !(t.pitch_gen < t.disc_learn && t.disc_learn < t.disc_active) {
            return Err(Error::Config("thresholds must be strictly increasing".into()));
        }
        if self.scale_factor == 0 {
            return Err(Error::Config("scale_factor must be positive".into()));
        }
        for (name, value) in [
            ("pitch_gen_threshold", t.pitch_gen),
            ("disc_learn_threshold", t.disc_learn),
            ("disc_active_threshold", t.disc_active),
            ("gen_halving_period", self.gen_halving_period),
            ("disc_step_size", self.disc_step_size),
        ] {
            if value % self.scale_factor != 0 {
                return Err(Error::Config(format!("scale_factor {} does not divide {name} {value}", self.scale_factor)));
            }
        }
        if self.gen_halving_period == 0 || self.disc_step_size == 0 {
            return Err(Error::Config("learning-rate periods must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let unit = 1usize << self.model.disc.depth;
        if self.model.disc.slice_len == 0 || self.model.disc.slice_len % unit != 0 {
            return Err(Error::BadSliceLength(self.model.disc.slice_len));
        }
        Ok(())
    }

    /// Thresholds after applying `scale_factor`.
    pub fn scaled_thresholds(&self) -> Thresholds {
        let s = self.scale_factor.max(1);
        Thresholds {
            pitch_gen: self.thresholds.pitch_gen / s,
            disc_learn: self.thresholds.disc_learn / s,
            disc_active: self.thresholds.disc_active / s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleFlags {
    /// Pitch losses on generated mels enter the objective.
    pub pitch_on_generated: bool,
    /// The discriminator is updated.
    pub disc_learning: bool,
    /// The adversarial term enters the generator objective.
    pub disc_active: bool,
}

pub fn schedule(step: u64, cfg: &TrainConfig) -> ScheduleFlags {
    let t = cfg.scaled_thresholds();
    ScheduleFlags {
        pitch_on_generated: step >= t.pitch_gen,
        disc_learning: step >= t.disc_learn,
        disc_active: step >= t.disc_active,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Generator,
    Discriminator,
}

pub fn lr_at(step: u64, cfg: &TrainConfig, which: Which) -> f64 {
    let s = cfg.scale_factor.max(1);
    match which {
        Which::Generator => cfg.lr * 0.5f64.powi((step / (cfg.gen_halving_period / s).max(1)) as i32),
        Which::Discriminator => cfg.lr * cfg.disc_gamma.powi((step / (cfg.disc_step_size / s).max(1)) as i32),
    }
}

/// Unweighted loss terms as measured.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub l_mel: f64,
    pub l_mmd: f64,
    pub l_mi: f64,
    pub l_pitch: f64,
    pub l_pitch_g: f64,
    pub l_pitch_repr: f64,
    pub l_d: f64,
}

/// Loss terms after gating, with the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_mel: f64,
    pub l_mmd: f64,
    pub l_mi: f64,
    pub l_pitch: f64,
    pub l_pitch_g: f64,
    pub l_pitch_repr: f64,
    pub l_d: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The weighted contributions, in objective order; they sum to `total`.
    pub fn weighted_terms(&self, cfg: &TrainConfig) -> [f64; 7] {
        [
            self.l_mel,
            cfg.beta * self.l_mmd,
            cfg.kappa * self.l_mi,
            self.l_pitch,
            cfg.lambda_g * self.l_pitch_g,
            self.l_pitch_repr,
            -self.l_d,
        ]
    }

    pub fn describe(&self) -> String {
        format!(
            "l_mel={:.9e} l_mmd={:.9e} l_mi={:.9e} l_pitch={:.9e} l_pitch_g={:.9e} l_pitch_repr={:.9e} l_d={:.9e} total={:.9e}",
            self.l_mel, self.l_mmd, self.l_mi, self.l_pitch, self.l_pitch_g, self.l_pitch_repr, self.l_d, self.total
        )
    }
}

/// Gates and weights the measured terms. Fails on any non-finite active term.
pub fn total_loss(step: u64, parts: &LossParts, flags: ScheduleFlags, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let gate = |on: bool, v: f64| if on { v } else { 0.0 };
    let mut b = LossBreakdown {
        l_mel: parts.l_mel,
        l_mmd: parts.l_mmd,
        l_mi: parts.l_mi,
        l_pitch: parts.l_pitch,
        l_pitch_g: gate(flags.pitch_on_generated, parts.l_pitch_g),
        l_pitch_repr: gate(flags.pitch_on_generated, parts.l_pitch_repr),
        l_d: gate(flags.disc_active, parts.l_d),
        total: 0.0,
    };
    b.total = b.weighted_terms(cfg).iter().sum();
    if !b.weighted_terms(cfg).iter().all(|v| v.is_finite()) || !b.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: b.describe(),
        });
    }
    Ok(b)
}

/// One training utterance held in memory.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub name: String,
    pub speaker: usize,
    pub text: String,
    pub ids: Vec<u32>,
    /// `(frames, 80)`.
    pub mel: Matrix,
    /// Hz per mel frame.
    pub pitch_hz: Vec<f32>,
    /// `(frames, R)` reduced SSL embedding.
    pub embedding: Matrix,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub speakers: Vec<String>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    /// Builds a corpus, numbering speakers in sorted name order.
    pub fn new(items: Vec<(String, String, Matrix, Vec<f32>, Matrix)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut speakers: Vec<String> = items.iter().map(|i| i.0.clone()).collect();
        speakers.sort();
        speakers.dedup();
        let dim = items[0].4.cols();
        let mut utterances = Vec::with_capacity(items.len());
        for (n, (spk, text, mel, pitch_hz, embedding)) in items.into_iter().enumerate() {
            if mel.cols() != MEL_BANDS {
                return Err(Error::DimMismatch {
                    expected: MEL_BANDS,
                    found: mel.cols(),
                });
            }
            if pitch_hz.len() != mel.rows() {
                return Err(Error::LengthMismatch(pitch_hz.len(), mel.rows()));
            }
            if embedding.cols() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: embedding.cols(),
                });
            }
            if mel.rows() == 0 || embedding.rows() == 0 {
                return Err(Error::EmptySequence);
            }
            utterances.push(Utterance {
                name: format!("utt{n}"),
                speaker: speakers.binary_search(&spk).expect("collected above"),
                ids: text_to_ids(&text)?,
                text,
                mel,
                pitch_hz,
                embedding,
            });
        }
        Ok(Self { speakers, utterances })
    }

    pub fn from_manifest(manifest: &CorpusManifest) -> Result<Self> {
        let mut items = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            items.push((
                e.speaker_id.clone(),
                e.text.clone(),
                read_matrix(&e.mel_path)?,
                read_vector(&e.pitch_path)?,
                read_matrix(&e.embedding_path)?,
            ));
        }
        Self::new(items)
    }

    pub fn embedding_dim(&self) -> usize {
        self.utterances[0].embedding.cols()
    }

    pub fn speaker_index(&self, name: &str) -> Result<usize> {
        self.speakers
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::UnknownSpeaker(name.into()))
    }
}

/// Everything updated by the generator optimizer: SSL consumer, acoustic
/// model, speaker table and pitch predictor. Parameter names start with
/// `consumer.`, `acoustic.`, `speakers` and `pitch.` respectively.
pub struct Generator {
    pub store: ParamStore,
    pub consumer: SslConsumer,
    pub acoustic: AcousticModel,
    pub pitch: PitchPredictor,
    speakers: Tensor,
}

impl Generator {
    pub fn new(seed: u64, model: &ModelConfig, embedding_dim: usize, n_speakers: usize) -> Result<Self> {
        let store = ParamStore::new(seed);
        let root = store.root();
        let consumer_cfg = ConsumerConfig {
            reduced_dim: embedding_dim,
            ..model.consumer.clone()
        };
        let consumer = SslConsumer::new(&root.pp("consumer"), &consumer_cfg)?;
        let acoustic = AcousticModel::new(&root.pp("acoustic"), &model.acoustic)?;
        let pitch = PitchPredictor::new(&root.pp("pitch"), &model.pitch)?;
        let speakers = root.get("speakers", &[n_speakers, model.consumer.speaker_dim], Init::Normal(0.3))?;
        Ok(Self {
            store,
            consumer,
            acoustic,
            pitch,
            speakers,
        })
    }

    pub fn speaker(&self, index: usize) -> Result<Tensor> {
        Ok(self.speakers.narrow(0, index, 1)?.squeeze(0)?)
    }

    /// Fingerprint of the synthesis path only (pitch predictor excluded).
    pub fn synthesis_fingerprint(&self) -> Result<u64> {
        self.store.fingerprint_where(|n| !n.starts_with("pitch."))
    }

    /// Mel for `text` conditioned on an SSL embedding `(frames, R)`, returned
    /// as `(frames_out, 80)` with the post-net applied.
    pub fn synthesize(&self, text: &str, embedding: &Matrix, speaker: usize, mel_len: usize) -> Result<Matrix> {
        let out = self.run(&text_to_ids(text)?, embedding, speaker, mel_len)?.0;
        let rows = out.mel_postnet.squeeze(0)?.to_vec2::<f32>()?;
        Matrix::from_rows(&rows)
    }

    fn run(&self, ids: &[u32], embedding: &Matrix, speaker: usize, mel_len: usize) -> Result<(GeneratorOutput, Tensor, Tensor)> {
        let emb = Tensor::from_slice(embedding.data(), (embedding.rows(), embedding.cols()), &Device::Cpu)?;
        let spk = self.speaker(speaker)?;
        let cond = self.consumer.forward(&emb, &spk, mel_len)?;
        let (out, encoded) = self.acoustic.generate(ids, &cond, true, &spk, mel_len)?;
        Ok((out, encoded, cond.global))
    }
}

/// L1 + L2 on both the decoder and post-net outputs, `target` `(1, M, 80)`.
pub fn mel_loss(out: &GeneratorOutput, target: &Tensor) -> Result<Tensor> {
    let part = |x: &Tensor| -> Result<Tensor> {
        let d = (x - target)?;
        Ok((d.abs()?.mean_all()? + d.sqr()?.mean_all()?)?)
    };
    Ok((part(&out.mel_decoder)? + part(&out.mel_postnet)?)?)
}

/// What one call to [`Trainer::train_step`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub flags: ScheduleFlags,
    pub losses: LossBreakdown,
    /// Discriminator objective when it was updated.
    pub disc_objective: Option<f64>,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub corpus: Corpus,
    pub generator: Generator,
    pub disc_store: ParamStore,
    pub disc: UNetDiscriminator,
    pub gen_adam: Adam,
    pub disc_adam: Adam,
    /// Steps completed so far.
    pub step: u64,
}

fn mean_of(terms: &[Tensor]) -> Result<Option<Tensor>> {
    if terms.is_empty() {
        return Ok(None);
    }
    Ok(Some(Tensor::stack(terms, 0)?.mean_all()?))
}

/// `(80, L)` excerpt of a `(1, M, 80)` generated mel at `offset`, zero
/// padded past the end.
fn generated_slice(mel: &Tensor, offset: usize, len: usize) -> Result<Tensor> {
    let m = mel.dim(1)?;
    let frames = mel.squeeze(0)?.t()?;
    let take = len.min(m - offset);
    let part = frames.narrow(1, offset, take)?;
    if take == len {
        return Ok(part.contiguous()?);
    }
    let pad = Tensor::zeros((MEL_BANDS, len - take), mel.dtype(), mel.device())?;
    Ok(Tensor::cat(&[part, pad], 1)?)
}

impl Trainer {
    pub fn new(cfg: TrainConfig, corpus: Corpus) -> Result<Self> {
        cfg.validate()?;
        let generator = Generator::new(cfg.seed, &cfg.model, corpus.embedding_dim(), corpus.speakers.len())?;
        let disc_store = ParamStore::new(cfg.seed ^ fnv1a("discriminator"));
        let disc = UNetDiscriminator::new(&disc_store.root().pp("disc"), &cfg.model.disc)?;
        Ok(Self {
            cfg,
            corpus,
            generator,
            disc_store,
            disc,
            gen_adam: Adam::default(),
            disc_adam: Adam::default(),
            step: 0,
        })
    }

    /// Utterance indices for a step; the whole corpus when it is no larger
    /// than the batch.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.corpus.utterances.len();
        let mut idx = shuffled(n, &mut stream_rng(self.cfg.seed, &[step, fnv1a("batch")]));
        idx.truncate(self.cfg.batch_size.min(n));
        idx.sort_unstable();
        idx
    }

    pub fn train_step(&mut self) -> Result<StepReport> {
        let step = self.step;
        let seed = self.cfg.seed;
        let flags = schedule(step, &self.cfg);
        let terms = self.cfg.terms;
        let slice_len = self.cfg.model.disc.slice_len;
        let want_adv = flags.disc_active && terms.adv;
        let want_slices = flags.disc_learning || want_adv;
        let pitch_gen = flags.pitch_on_generated && (terms.pitch_g || terms.pitch_repr);
        let gen = &self.generator;

        let mut mel_terms = Vec::new();
        let mut pitch_terms = Vec::new();
        let mut pitch_g_terms = Vec::new();
        let mut repr_terms = Vec::new();
        let mut globals = Vec::new();
        let mut summaries = Vec::new();
        let mut real_slices = Vec::new();
        let mut fake_slices = Vec::new();

        let batch = self.batch_indices(step);
        for &u in &batch {
            let utt = &self.corpus.utterances[u];
            let m = utt.mel.rows();
            let target = Tensor::from_slice(utt.mel.data(), (1, m, MEL_BANDS), &Device::Cpu)?;
            let (out, encoded, global) = gen.run(&utt.ids, &utt.embedding, utt.speaker, m)?;
            if terms.mel {
                mel_terms.push(mel_loss(&out, &target)?);
            }
            globals.push(global);
            summaries.push(encoder_summary(&encoded)?);

            if terms.pitch || pitch_gen {
                let mut noise = stream_rng(seed, &[step, u as u64, fnv1a("pitch-noise")]);
                let f0 = normalize_pitch(&utt.pitch_hz, Some(&mut noise));
                let f0 = Tensor::from_vec(f0, (1, m), &Device::Cpu)?;
                let gt_pred = gen.pitch.predict(&target)?;
                if terms.pitch {
                    pitch_terms.push(pitch_loss_rows(&f0, &gt_pred.f0)?.mean_all()?);
                }
                if pitch_gen {
                    let gen_pred = gen.pitch.predict(&out.mel_postnet)?;
                    if terms.pitch_g {
                        pitch_g_terms.push(pitch_loss_rows(&f0, &gen_pred.f0)?.mean_all()?);
                    }
                    if terms.pitch_repr {
                        repr_terms.push(repr_loss(&gt_pred.repr.detach(), &gen_pred.repr)?);
                    }
                }
            }

            if want_slices {
                let mut rng = stream_rng(seed, &[step, u as u64, fnv1a("slice")]);
                let (offset, real) = sample_slice(&utt.mel, slice_len, &mut rng);
                real_slices.push(Tensor::from_vec(real.into_data(), (MEL_BANDS, slice_len), &Device::Cpu)?);
                fake_slices.push(generated_slice(&out.mel_postnet, offset, slice_len)?);
            }
        }

        let b = batch.len();
        let l_mmd = if terms.mmd && b >= 2 {
            let g = Tensor::stack(&globals, 0)?;
            let prior = standard_normal(b, g.dim(1)?, &mut stream_rng(seed, &[step, fnv1a("prior")]), DType::F32)?;
            Some(mmd_loss(&g, &prior)?)
        } else {
            None
        };
        let l_mi = if terms.mi && b >= 3 {
            Some(mi_loss(&Tensor::stack(&globals, 0)?, &Tensor::stack(&summaries, 0)?)?)
        } else {
            None
        };

        let (l_d, disc_grads, disc_objective) = if want_slices {
            let real = Tensor::stack(&real_slices, 0)?;
            let fake = Tensor::stack(&fake_slices, 0)?;
            let l_d = if want_adv {
                let fake_g = if self.cfg.adv_grad { fake.clone() } else { fake.detach() };
                Some(generator_score(&self.disc, &fake_g, seed, step, true)?)
            } else {
                None
            };
            let (grads, objective) = if flags.disc_learning {
                let dl = disc_loss(&self.disc, &real, &fake.detach(), seed, step, true)?;
                let value = scalar(&dl.d_loss)?;
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        detail: format!(
                            "discriminator hinge={:e} reconstruction={:e}",
                            scalar(&dl.hinge)?,
                            scalar(&dl.reconstruction)?
                        ),
                    });
                }
                (Some(dl.d_loss.backward()?), Some(value))
            } else {
                (None, None)
            };
            (l_d, grads, objective)
        } else {
            (None, None, None)
        };

        let l_mel = mean_of(&mel_terms)?;
        let l_pitch = mean_of(&pitch_terms)?;
        let l_pitch_g = mean_of(&pitch_g_terms)?;
        let l_pitch_repr = mean_of(&repr_terms)?;
        let value = |t: &Option<Tensor>| -> Result<f64> { t.as_ref().map_or(Ok(0.0), scalar) };
        let parts = LossParts {
            l_mel: value(&l_mel)?,
            l_mmd: value(&l_mmd)?,
            l_mi: value(&l_mi)?,
            l_pitch: value(&l_pitch)?,
            l_pitch_g: value(&l_pitch_g)?,
            l_pitch_repr: value(&l_pitch_repr)?,
            l_d: value(&l_d)?,
        };
        let losses = total_loss(step, &parts, flags, &self.cfg)?;

        let weighted = [
            (l_mel, 1.0),
            (l_mmd, self.cfg.beta),
            (l_mi, self.cfg.kappa),
            (l_pitch, 1.0),
            (l_pitch_g, self.cfg.lambda_g),
            (l_pitch_repr, 1.0),
            (l_d, -1.0),
        ];
        let mut objective: Option<Tensor> = None;
        for (term, w) in weighted {
            if let Some(t) = term {
                let t = (t * w)?;
                objective = Some(match objective {
                    Some(acc) => (acc + t)?,
                    None => t,
                });
            }
        }

        let lr_generator = lr_at(step, &self.cfg, Which::Generator);
        let lr_discriminator = lr_at(step, &self.cfg, Which::Discriminator);
        if let Some(objective) = objective {
            let grads = objective.backward()?;
            self.gen_adam.step(&self.generator.store, &grads, lr_generator)?;
        }
        if let Some(grads) = disc_grads {
            self.disc_adam.step(&self.disc_store, &grads, lr_discriminator)?;
            self.disc.refresh_spectral(1)?;
        }
        self.step += 1;
        Ok(StepReport {
            step,
            flags,
            losses,
            disc_objective,
            lr_generator,
            lr_discriminator,
        })
    }

    /// Writes parameters, optimizer moments, power-iteration vectors, the
    /// configuration and a metadata record into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |file: String, t: &Tensor| -> Result<()> {
            let values = t.flatten_all()?.to_vec1::<f32>()?;
            write_tensor(dir.join(file), &TensorData::Vector(values))
        };
        for (tag, store, adam) in [
            ("gen", &self.generator.store, &self.gen_adam),
            ("disc", &self.disc_store, &self.disc_adam),
        ] {
            for (name, var) in store.vars() {
                put(format!("{tag}.param.{name}.kse"), var.as_tensor())?;
                if let Some(m) = adam.first.get(&name) {
                    put(format!("{tag}.adam_m.{name}.kse"), m)?;
                }
                if let Some(v) = adam.second.get(&name) {
                    put(format!("{tag}.adam_v.{name}.kse"), v)?;
                }
            }
        }
        for w in self.disc.spectral_weights() {
            let st = w.state();
            write_tensor(dir.join(format!("disc.sn_u.{}.kse", w.name())), &TensorData::Vector(st.u))?;
            write_tensor(dir.join(format!("disc.sn_v.{}.kse", w.name())), &TensorData::Vector(st.v))?;
        }
        let mut meta = String::new();
        let _ = writeln!(meta, "step = {}", self.step);
        let _ = writeln!(meta, "seed = {}", self.cfg.seed);
        let _ = writeln!(meta, "gen_adam_steps = {}", self.gen_adam.steps);
        let _ = writeln!(meta, "disc_adam_steps = {}", self.disc_adam.steps);
        let _ = writeln!(meta, "embedding_dim = {}", self.corpus.embedding_dim());
        for s in &self.corpus.speakers {
            let _ = writeln!(meta, "speaker = {s}");
        }
        let write = |name: &str, text: &str| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        write("config.cfg", &self.cfg.to_kv())?;
        write("meta.txt", &meta)
    }

    /// Rebuilds a trainer from [`Trainer::save`] output.
    pub fn load(dir: impl AsRef<Path>, corpus: Corpus) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg = TrainConfig::read(dir.join("config.cfg"))?;
        let meta = Checkpoint::read_meta(dir)?;
        if meta.speakers != corpus.speakers {
            return Err(Error::Config(format!(
                "checkpoint speakers {:?} differ from corpus speakers {:?}",
                meta.speakers, corpus.speakers
            )));
        }
        if meta.embedding_dim != corpus.embedding_dim() {
            return Err(Error::DimMismatch {
                expected: meta.embedding_dim,
                found: corpus.embedding_dim(),
            });
        }
        let mut trainer = Self::new(cfg, corpus)?;
        trainer.step = meta.step;
        trainer.gen_adam.steps = meta.gen_adam_steps;
        trainer.disc_adam.steps = meta.disc_adam_steps;
        for (tag, store, adam) in [
            ("gen", &trainer.generator.store, &mut trainer.gen_adam),
            ("disc", &trainer.disc_store, &mut trainer.disc_adam),
        ] {
            load_store(dir, tag, store, Some(adam))?;
        }
        for w in trainer.disc.spectral_weights() {
            let u = read_vector(dir.join(format!("disc.sn_u.{}.kse", w.name())))?;
            let v = read_vector(dir.join(format!("disc.sn_v.{}.kse", w.name())))?;
            w.set_state(SpectralState { u, v })?;
        }
        Ok(trainer)
    }

    /// Only the generator side of a checkpoint, for synthesis.
    pub fn load_generator(dir: impl AsRef<Path>, cfg: &TrainConfig, meta: &Checkpoint) -> Result<Generator> {
        let generator = Generator::new(cfg.seed, &cfg.model, meta.embedding_dim, meta.speakers.len())?;
        load_store(dir.as_ref(), "gen", &generator.store, None)?;
        Ok(generator)
    }
}

fn read_shaped(path: &Path, name: &str, like: &Tensor) -> Result<Tensor> {
    let values = read_vector(path)?;
    if values.len() != like.elem_count() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint tensor {name} has {} values, model needs {}",
            values.len(),
            like.elem_count()
        )));
    }
    Ok(Tensor::from_vec(values, like.dims(), &Device::Cpu)?)
}

fn load_store(dir: &Path, tag: &str, store: &ParamStore, adam: Option<&mut Adam>) -> Result<()> {
    let mut adam = adam;
    for (name, var) in store.vars() {
        let like = var.as_tensor();
        var.set(&read_shaped(&dir.join(format!("{tag}.param.{name}.kse")), &name, like)?)?;
        let Some(adam) = adam.as_deref_mut() else {
            continue;
        };
        let m = dir.join(format!("{tag}.adam_m.{name}.kse"));
        if m.exists() {
            adam.first.insert(name.clone(), read_shaped(&m, &name, like)?);
            let v = dir.join(format!("{tag}.adam_v.{name}.kse"));
            adam.second.insert(name.clone(), read_shaped(&v, &name, like)?);
        }
    }
    Ok(())
}

/// Checkpoint metadata record.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub seed: u64,
    pub gen_adam_steps: u64,
    pub disc_adam_steps: u64,
    pub embedding_dim: usize,
    pub speakers: Vec<String>,
}

impl Checkpoint {
    pub fn read_meta(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join("meta.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut fields = BTreeMap::new();
        let mut speakers = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Config(format!("{}: bad line {line:?}", path.display())))?;
            if k == "speaker" {
                speakers.push(v.to_string());
            } else {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<u64> {
            let v = fields
                .get(k)
                .ok_or_else(|| Error::Config(format!("{}: missing {k}", path.display())))?;
            parse_num(k, v)
        };
        Ok(Self {
            step: get("step")?,
            seed: get("seed")?,
            gen_adam_steps: get("gen_adam_steps")?,
            disc_adam_steps: get("disc_adam_steps")?,
            embedding_dim: get("embedding_dim")? as usize,
            speakers,
        })
    }
}

/// Parameter counts per network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub consumer: usize,
    pub acoustic: usize,
    pub speakers: usize,
    pub pitch: usize,
    pub discriminator: usize,
}

impl ParamReport {
    pub fn generator_total(&self) -> usize {
        self.consumer + self.acoustic + self.speakers + self.pitch
    }
}

pub fn param_report(model: &ModelConfig, embedding_dim: usize, n_speakers: usize) -> Result<ParamReport> {
    let gen = Generator::new(0, model, embedding_dim, n_speakers)?;
    let count = |prefix: &str| -> usize {
        gen.store
            .vars()
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    };
    let disc_store = ParamStore::new(0);
    UNetDiscriminator::new(&disc_store.root().pp("disc"), &model.disc)?;
    Ok(ParamReport {
        consumer: count("consumer."),
        acoustic: count("acoustic."),
        speakers: count("speakers"),
        pitch: count("pitch."),
        discriminator: disc_store.num_params(),
    })
}
