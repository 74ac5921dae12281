//! Small deterministic corpora for tests, smoke runs and demos.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io_formats::{write_tensor, CorpusManifest, Matrix, ParallelPair, TensorData, UtteranceEntry, MEL_BANDS};
use crate::nn::stream_rng;
use crate::trainer::Corpus;

const WORDS: [&str; 12] = [
    "la", "sing", "moon", "river", "blue", "night", "oh", "light", "dream", "song", "away", "home",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub utterances: usize,
    pub speakers: usize,
    /// Mel frames per utterance; each utterance adds `index * frame_step`.
    pub frames: usize,
    pub frame_step: usize,
    pub embedding_dim: usize,
    pub pairs: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            utterances: 4,
            speakers: 2,
            frames: 48,
            frame_step: 4,
            embedding_dim: 24,
            pairs: 0,
            seed: 0,
        }
    }
}

/// Smooth pitch contour in Hz with unvoiced edges.
pub fn synthetic_pitch(frames: usize, base_hz: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let rate = rng.random_range(0.05f32..0.2);
    let phase = rng.random_range(0.0f32..6.28);
    let drift = rng.random_range(-0.2f32..0.2);
    (0..frames)
        .map(|t| {
            if t < 2 || t + 2 >= frames {
                return 0.0;
            }
            let x = t as f32 / frames as f32;
            base_hz * (1.0 + 0.06 * (rate * t as f32 + phase).sin() + drift * x)
        })
        .collect()
}

/// Log-mel-like frames with a formant bump that follows the pitch.
pub fn synthetic_mel(pitch_hz: &[f32], speaker: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let tilt = rng.random_range(0.01f32..0.03);
    let gain = 1.5 + 0.5 * speaker as f32;
    let mut data = Vec::with_capacity(pitch_hz.len() * MEL_BANDS);
    for &f0 in pitch_hz {
        let voiced = f0 > 0.0;
        let centre = if voiced { 10.0 + f0 / 12.0 } else { 60.0 };
        for b in 0..MEL_BANDS {
            let d = (b as f32 - centre) / 6.0;
            let bump = if voiced { gain * (-0.5 * d * d).exp() } else { 0.3 };
            data.push(-4.0 - tilt * b as f32 + bump);
        }
    }
    Matrix::new(pitch_hz.len(), MEL_BANDS, data).expect("sized above")
}

/// Frames of smooth random features, `(frames, dim)`.
pub fn synthetic_embedding(frames: usize, dim: usize, offset: &[f32], rng: &mut ChaCha8Rng) -> Matrix {
    let freq: Vec<f32> = (0..dim).map(|_| rng.random_range(0.05f32..0.5)).collect();
    let phase: Vec<f32> = (0..dim).map(|_| rng.random_range(0.0f32..6.28)).collect();
    let mut data = Vec::with_capacity(frames * dim);
    for t in 0..frames {
        for d in 0..dim {
            let noise: f32 = rng.random_range(-0.1..0.1);
            data.push((freq[d] * t as f32 + phase[d]).sin() + offset.get(d).copied().unwrap_or(0.0) + noise);
        }
    }
    Matrix::new(frames, dim, data).expect("sized above")
}

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(2..5);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

/// One generated utterance: `(speaker, text, mel, pitch, embedding)`.
pub type SyntheticItem = (String, String, Matrix, Vec<f32>, Matrix);

pub fn synthetic_items(spec: &SyntheticSpec) -> Vec<SyntheticItem> {
    (0..spec.utterances)
        .map(|i| {
            let mut rng = stream_rng(spec.seed, &[i as u64, 0x5e7]);
            let speaker = i % spec.speakers.max(1);
            let frames = spec.frames + i * spec.frame_step;
            let pitch = synthetic_pitch(frames, 140.0 + 60.0 * speaker as f32, &mut rng);
            let mel = synthetic_mel(&pitch, speaker, &mut rng);
            let emb = synthetic_embedding(frames.div_ceil(2), spec.embedding_dim, &[], &mut rng);
            (format!("spk{speaker}"), sentence(&mut rng), mel, pitch, emb)
        })
        .collect()
}

pub fn synthetic_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    Corpus::new(synthetic_items(spec))
}

/// Parallel speech/singing embedding pairs where the first quarter of the
/// dimensions shifts strongly between the two modes.
pub fn synthetic_pairs(spec: &SyntheticSpec) -> Vec<(String, Matrix, Matrix)> {
    let dim = spec.embedding_dim;
    (0..spec.pairs)
        .map(|i| {
            let mut rng = stream_rng(spec.seed, &[i as u64, 0xfa1]);
            let shift: Vec<f32> = (0..dim)
                .map(|d| if d < dim / 4 { 3.0 + d as f32 * 0.1 } else { rng.random_range(-0.05..0.05) })
                .collect();
            let frames = 20 + 3 * i;
            let speech = synthetic_embedding(frames, dim, &[], &mut rng);
            let singing = synthetic_embedding(frames + 5, dim, &shift, &mut rng);
            (format!("spk{}", i % spec.speakers.max(1)), speech, singing)
        })
        .collect()
}

/// Writes the corpus tensors and a manifest (`manifest.tsv`) into `dir`.
pub fn write_synthetic_corpus(dir: impl AsRef<Path>, spec: &SyntheticSpec) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = CorpusManifest::default();
    for (i, (spk, text, mel, pitch, emb)) in synthetic_items(spec).into_iter().enumerate() {
        let names = [format!("utt{i}.mel.kse"), format!("utt{i}.f0.kse"), format!("utt{i}.ssl.kse")];
        write_tensor(dir.join(&names[0]), &TensorData::Matrix(mel))?;
        write_tensor(dir.join(&names[1]), &TensorData::Vector(pitch))?;
        write_tensor(dir.join(&names[2]), &TensorData::Matrix(emb))?;
        let [mel_path, pitch_path, embedding_path] = names.map(PathBuf::from);
        manifest.entries.push(UtteranceEntry {
            speaker_id: spk,
            text,
            mel_path,
            pitch_path,
            embedding_path,
        });
    }
    for (i, (spk, speech, singing)) in synthetic_pairs(spec).into_iter().enumerate() {
        let speech_path = PathBuf::from(format!("pair{i}.speech.kse"));
        let singing_path = PathBuf::from(format!("pair{i}.singing.kse"));
        write_tensor(dir.join(&speech_path), &TensorData::Matrix(speech))?;
        write_tensor(dir.join(&singing_path), &TensorData::Matrix(singing))?;
        manifest.parallel_pairs.push(ParallelPair {
            speaker_id: spk,
            speech_embedding_path: speech_path,
            singing_embedding_path: singing_path,
        });
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest.to_tsv()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
