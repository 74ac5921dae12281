//! Non-attentive encoder/decoder acoustic model.
//!
//! Text symbols are encoded, fused with speaker and global SSL embeddings,
//! rotated by position, stretched to the mel length by nearest-neighbour
//! expansion, summed with the local SSL conditioning and decoded to 80-band
//! mels. Alignment comes only from the expansion; there is no attention.

use candle_core::{DType, Tensor, D};

use crate::conditioning::ConditioningOutput;
use crate::error::{Error, Result};
use crate::io_formats::MEL_BANDS;
use crate::nn::{interpolate_time, mish, Conv1d, Init, LayerNorm, Linear, Lstm, Padding, Scope};

/// Character inventory. `_` is silence, space is the word boundary.
pub const SYMBOLS: &str = "_ abcdefghijklmnopqrstuvwxyz'.,?!-";

pub fn vocab_size() -> usize {
    SYMBOLS.chars().count()
}

/// Lower-cases and maps text to symbol ids.
pub fn text_to_ids(text: &str) -> Result<Vec<u32>> {
    let ids = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| {
            SYMBOLS
                .chars()
                .position(|s| s == c)
                .map(|p| p as u32)
                .ok_or(Error::UnknownSymbol(c))
        })
        .collect::<Result<Vec<_>>>()?;
    if ids.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionMode {
    Rotary,
    /// Additive sinusoidal table, kept for ablations.
    Additive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticConfig {
    pub enc_dim: usize,
    pub dec_dim: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub kernel: usize,
    pub postnet_channels: usize,
    pub postnet_layers: usize,
    pub speaker_dim: usize,
    pub global_dim: usize,
    pub cond_channels: usize,
    pub position: PositionMode,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        Self {
            enc_dim: 128,
            dec_dim: 128,
            enc_blocks: 3,
            dec_blocks: 2,
            kernel: 5,
            postnet_channels: 128,
            postnet_layers: 5,
            speaker_dim: 16,
            global_dim: 16,
            cond_channels: 64,
            position: PositionMode::Rotary,
        }
    }
}

/// Both outputs are `(1, frames, 80)`.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub mel_decoder: Tensor,
    pub mel_postnet: Tensor,
}

fn rotation_tables(len: usize, dim: usize, dtype: DType) -> Result<(Tensor, Tensor)> {
    let half = dim / 2;
    let mut cos = Vec::with_capacity(len * half);
    let mut sin = Vec::with_capacity(len * half);
    for pos in 0..len {
        for k in 0..half {
            let theta = pos as f64 * 10000f64.powf(-2.0 * k as f64 / dim as f64);
            cos.push(theta.cos());
            sin.push(theta.sin());
        }
    }
    let dev = candle_core::Device::Cpu;
    Ok((
        Tensor::from_vec(cos, (len, half), &dev)?.to_dtype(dtype)?,
        Tensor::from_vec(sin, (len, half), &dev)?.to_dtype(dtype)?,
    ))
}

/// Rotary position transform over `(batch, len, dim)`: feature pair
/// `(2k, 2k+1)` at position `p` is rotated by `p * 10000^(-2k/dim)`.
pub fn rope_apply(seq: &Tensor) -> Result<Tensor> {
    let (b, len, dim) = seq.dims3()?;
    if dim % 2 != 0 {
        return Err(Error::OddFeatureDim(dim));
    }
    let (cos, sin) = rotation_tables(len, dim, seq.dtype())?;
    let pairs = seq.reshape((b, len, dim / 2, 2))?;
    let x0 = pairs.narrow(3, 0, 1)?.squeeze(3)?;
    let x1 = pairs.narrow(3, 1, 1)?.squeeze(3)?;
    let y0 = (x0.broadcast_mul(&cos)? - x1.broadcast_mul(&sin)?)?;
    let y1 = (x0.broadcast_mul(&sin)? + x1.broadcast_mul(&cos)?)?;
    Ok(Tensor::stack(&[y0, y1], 3)?.reshape((b, len, dim))?)
}

/// Adds the classic interleaved sine/cosine table (ablation path).
pub fn sinusoid_add(seq: &Tensor) -> Result<Tensor> {
    let (_, len, dim) = seq.dims3()?;
    if dim % 2 != 0 {
        return Err(Error::OddFeatureDim(dim));
    }
    let (cos, sin) = rotation_tables(len, dim, seq.dtype())?;
    let table = Tensor::stack(&[sin, cos], 2)?.reshape((len, dim))?;
    Ok(seq.broadcast_add(&table)?)
}

/// Source index for each of `target` frames: `floor((j + 0.5) * src / target)`.
pub fn expand_indices(src: usize, target: usize) -> Vec<u32> {
    (0..target)
        .map(|j| (((2 * j + 1) * src) / (2 * target)).min(src - 1) as u32)
        .collect()
}

/// Nearest-neighbour stretch of `(batch, src, dim)` to `(batch, target, dim)`.
pub fn expand_nn(seq: &Tensor, target: usize) -> Result<Tensor> {
    let src = seq.dim(1)?;
    if src == 0 || target == 0 {
        return Err(Error::EmptySequence);
    }
    let ids = Tensor::new(expand_indices(src, target).as_slice(), seq.device())?;
    Ok(seq.index_select(&ids, 1)?)
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv1d,
    norm: LayerNorm,
}

impl ConvBlock {
    fn new(s: &Scope, dim: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv1d::new(&s.pp("conv"), dim, dim, kernel, Padding::Zeros)?,
            norm: LayerNorm::new(&s.pp("norm"), dim)?,
        })
    }

    /// Residual block over `(1, dim, T)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = mish(&self.norm.forward_channels(&self.conv.forward(x)?)?)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
pub struct AcousticModel {
    cfg: AcousticConfig,
    embedding: Tensor,
    enc_blocks: Vec<ConvBlock>,
    enc_fwd: Lstm,
    enc_bwd: Lstm,
    fuse: Linear,
    local_proj: Linear,
    dec_blocks: Vec<ConvBlock>,
    dec_rnn: Lstm,
    to_mel: Linear,
    postnet: Vec<Conv1d>,
}

impl AcousticModel {
    pub fn new(s: &Scope, cfg: &AcousticConfig) -> Result<Self> {
        if cfg.enc_dim % 2 != 0 {
            return Err(Error::OddFeatureDim(cfg.enc_dim));
        }
        if cfg.dec_dim % 2 != 0 {
            return Err(Error::OddFeatureDim(cfg.dec_dim));
        }
        let e = cfg.enc_dim;
        let d = cfg.dec_dim;
        let enc = s.pp("encoder");
        let dec = s.pp("decoder");
        let p = cfg.postnet_channels;
        let postnet = (0..cfg.postnet_layers)
            .map(|i| {
                let c_in = if i == 0 { MEL_BANDS } else { p };
                let c_out = if i + 1 == cfg.postnet_layers { MEL_BANDS } else { p };
                Conv1d::new(&s.pp(&format!("postnet{i}")), c_in, c_out, cfg.kernel, Padding::Zeros)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            embedding: enc.get("embedding", &[vocab_size(), e], Init::Normal(0.3))?,
            enc_blocks: (0..cfg.enc_blocks)
                .map(|i| ConvBlock::new(&enc.pp(&format!("block{i}")), e, cfg.kernel))
                .collect::<Result<_>>()?,
            enc_fwd: Lstm::new(&enc.pp("rnn_fwd"), e, e / 2, false)?,
            enc_bwd: Lstm::new(&enc.pp("rnn_bwd"), e, e / 2, true)?,
            fuse: Linear::new(&s.pp("fuse"), e + cfg.speaker_dim + cfg.global_dim, d)?,
            local_proj: Linear::new(&s.pp("local_proj"), cfg.cond_channels, d)?,
            dec_blocks: (0..cfg.dec_blocks)
                .map(|i| ConvBlock::new(&dec.pp(&format!("block{i}")), d, cfg.kernel))
                .collect::<Result<_>>()?,
            dec_rnn: Lstm::new(&dec.pp("rnn"), d, d, false)?,
            to_mel: Linear::new(&dec.pp("to_mel"), d, MEL_BANDS)?,
            postnet,
        })
    }

    pub fn config(&self) -> &AcousticConfig {
        &self.cfg
    }

    pub fn embedding_table(&self) -> &Tensor {
        &self.embedding
    }

    /// Symbol ids to `(1, T, enc_dim)`.
    pub fn encode(&self, ids: &[u32]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        let vocab = vocab_size() as u32;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::IndexOutOfRange {
                index: bad as usize,
                dim: vocab as usize,
            });
        }
        let idx = Tensor::new(ids, self.embedding.device())?;
        let mut x = self.embedding.index_select(&idx, 0)?.t()?.unsqueeze(0)?;
        for b in &self.enc_blocks {
            x = b.forward(&x)?;
        }
        let x = x.transpose(1, 2)?.contiguous()?;
        Ok(Tensor::cat(&[self.enc_fwd.forward(&x)?, self.enc_bwd.forward(&x)?], 2)?)
    }

    fn position(&self, x: &Tensor) -> Result<Tensor> {
        match self.cfg.position {
            PositionMode::Rotary => rope_apply(x),
            PositionMode::Additive => sinusoid_add(x),
        }
    }

    /// Decoder input: fused, positioned and expanded text states plus the
    /// positioned local conditioning, `(1, mel_len, dec_dim)`.
    pub fn decoder_input(
        &self,
        encoded: &Tensor,
        local: Option<&Tensor>,
        global: &Tensor,
        spk: &Tensor,
        mel_len: usize,
    ) -> Result<Tensor> {
        let t = encoded.dim(1)?;
        let per_frame = |v: &Tensor| -> Result<Tensor> {
            let n = v.dim(0)?;
            Ok(v.reshape((1, 1, n))?.broadcast_as((1, t, n))?)
        };
        let fused = Tensor::cat(&[encoded.clone(), per_frame(spk)?, per_frame(global)?], 2)?;
        let text = expand_nn(&self.position(&self.fuse.forward(&fused)?)?, mel_len)?;
        match local {
            None => Ok(text),
            Some(local) => {
                let (_, c, _) = local.dims3()?;
                if c != self.cfg.cond_channels {
                    return Err(Error::ShapeMismatch(format!(
                        "local conditioning has {c} channels, expected {}",
                        self.cfg.cond_channels
                    )));
                }
                let local = interpolate_time(local, mel_len)?.transpose(1, 2)?;
                let local = self.position(&self.local_proj.forward(&local)?)?;
                Ok((text + local)?)
            }
        }
    }

    pub fn decode(&self, x: &Tensor) -> Result<GeneratorOutput> {
        let mut h = x.transpose(1, 2)?;
        for b in &self.dec_blocks {
            h = b.forward(&h)?;
        }
        let h = self.dec_rnn.forward(&h.transpose(1, 2)?.contiguous()?)?;
        let mel_decoder = self.to_mel.forward(&h)?;
        let mut r = mel_decoder.transpose(1, 2)?;
        let last = self.postnet.len() - 1;
        for (i, conv) in self.postnet.iter().enumerate() {
            r = conv.forward(&r)?;
            if i != last {
                r = r.tanh()?;
            }
        }
        let mel_postnet = (&mel_decoder + r.transpose(1, 2)?)?;
        Ok(GeneratorOutput {
            mel_decoder,
            mel_postnet,
        })
    }

    /// Full generation. `spk` is `(speaker_dim,)`; the conditioning's local
    /// sequence may be left out for ablations.
    pub fn generate(
        &self,
        ids: &[u32],
        conditioning: &ConditioningOutput,
        use_local: bool,
        spk: &Tensor,
        mel_len: usize,
    ) -> Result<(GeneratorOutput, Tensor)> {
        if mel_len == 0 {
            return Err(Error::EmptySequence);
        }
        let encoded = self.encode(ids)?;
        let local = if use_local { Some(&conditioning.local) } else { None };
        let x = self.decoder_input(&encoded, local, &conditioning.global, spk, mel_len)?;
        Ok((self.decode(&x)?, encoded))
    }
}

/// Time average of encoder states, `(enc_dim,)`.
pub fn encoder_summary(encoded: &Tensor) -> Result<Tensor> {
    Ok(encoded.mean(D::Minus2)?.squeeze(0)?)
}
