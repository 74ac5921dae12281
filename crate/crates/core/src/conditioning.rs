//! SSL consumer: turns reduced SSL embeddings into a frame-level (local)
//! conditioning sequence and an utterance-level (global) embedding, and
//! hosts the two regularizers on the global embedding.

use candle_core::{DType, Tensor, D};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{interpolate_time, mish, normalize_last, Conv1d, Init, Linear, Padding, Scope};

#[derive(Debug, Clone, PartialEq)]
pub struct ConsumerConfig {
    /// Width of the reduced SSL embedding.
    pub reduced_dim: usize,
    pub proj_dim: usize,
    pub channels: usize,
    pub blocks: usize,
    /// Leading blocks that use kernel 3 and no closing activation.
    pub narrow_blocks: usize,
    pub wide_kernel: usize,
    pub global_dim: usize,
    pub speaker_dim: usize,
}

impl Default for ConsumerConfig {
    fn default() -> Self {
        Self {
            reduced_dim: 93,
            proj_dim: 8,
            channels: 64,
            blocks: 14,
            narrow_blocks: 6,
            wide_kernel: 5,
            global_dim: 16,
            speaker_dim: 16,
        }
    }
}

/// `local`: `(1, channels, mel_len)`; `global`: `(global_dim,)`.
#[derive(Debug, Clone)]
pub struct ConditioningOutput {
    pub local: Tensor,
    pub global: Tensor,
}

/// Layer norm over channels whose gain and shift are predicted from the
/// speaker embedding.
#[derive(Debug, Clone)]
struct ConditionalLayerNorm {
    scale: Linear,
    shift: Linear,
}

impl ConditionalLayerNorm {
    fn new(s: &Scope, speaker_dim: usize, channels: usize) -> Result<Self> {
        let scale = s.pp("scale");
        // gains start near one
        scale.get("bias", &[channels], Init::Const(1.0))?;
        Ok(Self {
            scale: Linear::new(&scale, speaker_dim, channels)?,
            shift: Linear::new(&s.pp("shift"), speaker_dim, channels)?,
        })
    }

    /// `x`: `(1, C, T)`, `spk`: `(S,)`.
    fn forward(&self, x: &Tensor, spk: &Tensor) -> Result<Tensor> {
        let spk = spk.unsqueeze(0)?;
        let gain = self.scale.forward(&spk)?.unsqueeze(2)?;
        let shift = self.shift.forward(&spk)?.unsqueeze(2)?;
        let normed = normalize_last(&x.transpose(1, 2)?, 1e-5)?.transpose(1, 2)?;
        Ok(normed.broadcast_mul(&gain)?.broadcast_add(&shift)?)
    }
}

#[derive(Debug, Clone)]
struct ConsumerBlock {
    conv: Conv1d,
    point: Conv1d,
    cln: ConditionalLayerNorm,
    close_with_activation: bool,
}

impl ConsumerBlock {
    fn forward(&self, x: &Tensor, spk: &Tensor) -> Result<Tensor> {
        let h = self.point.forward(&mish(&self.conv.forward(x)?)?)?;
        let mut y = (x + h)?;
        if self.close_with_activation {
            y = mish(&y)?;
        }
        self.cln.forward(&y, spk)
    }
}

#[derive(Debug, Clone)]
pub struct SslConsumer {
    cfg: ConsumerConfig,
    proj: Linear,
    inorm_gain: Tensor,
    inorm_bias: Tensor,
    input: Conv1d,
    blocks: Vec<ConsumerBlock>,
    bottleneck: Conv1d,
}

impl SslConsumer {
    pub fn new(s: &Scope, cfg: &ConsumerConfig) -> Result<Self> {
        let c = cfg.channels;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let b = s.pp(&format!("block{i}"));
                let narrow = i < cfg.narrow_blocks;
                let k = if narrow { 3 } else { cfg.wide_kernel };
                Ok(ConsumerBlock {
                    conv: Conv1d::new(&b.pp("conv"), c, c, k, Padding::Replicate)?,
                    point: Conv1d::new(&b.pp("point"), c, c, 1, Padding::Replicate)?,
                    cln: ConditionalLayerNorm::new(&b.pp("cln"), cfg.speaker_dim, c)?,
                    close_with_activation: !narrow,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            proj: Linear::new(&s.pp("proj"), cfg.reduced_dim, cfg.proj_dim)?,
            inorm_gain: s.get("inorm.gain", &[cfg.proj_dim], Init::Const(1.0))?,
            inorm_bias: s.get("inorm.bias", &[cfg.proj_dim], Init::Const(0.0))?,
            input: Conv1d::new(&s.pp("input"), cfg.proj_dim, c, 1, Padding::Replicate)?,
            blocks,
            bottleneck: Conv1d::new(&s.pp("bottleneck"), c, cfg.global_dim, 1, Padding::Replicate)?,
        })
    }

    pub fn config(&self) -> &ConsumerConfig {
        &self.cfg
    }

    /// Linear projection plus per-channel instance normalization (with affine),
    /// before the activation: `(frames, R)` in, `(1, proj_dim, frames)` out.
    pub fn project_normalized(&self, emb: &Tensor) -> Result<Tensor> {
        let (_, r) = emb.dims2()?;
        if r != self.cfg.reduced_dim {
            return Err(Error::DimMismatch {
                expected: self.cfg.reduced_dim,
                found: r,
            });
        }
        let p = self.proj.forward(emb)?.t()?.unsqueeze(0)?;
        let normed = normalize_last(&p, 1e-5)?;
        Ok(normed
            .broadcast_mul(&self.inorm_gain.reshape((1, (), 1))?)?
            .broadcast_add(&self.inorm_bias.reshape((1, (), 1))?)?)
    }

    /// `(frames, R)` to `(1, proj_dim, mel_len)`.
    pub fn project_reduce(&self, emb: &Tensor, mel_len: usize) -> Result<Tensor> {
        if mel_len == 0 {
            return Err(Error::EmptySequence);
        }
        if emb.dim(0)? == 0 {
            return Err(Error::EmptySequence);
        }
        interpolate_time(&mish(&self.project_normalized(emb)?)?, mel_len)
    }

    /// Global path before time averaging: `(1, global_dim, T)`.
    pub fn bottleneck_frames(&self, local: &Tensor) -> Result<Tensor> {
        self.bottleneck.forward(local)
    }

    pub fn consumer_forward(&self, projected: &Tensor, spk: &Tensor) -> Result<ConditioningOutput> {
        let (b, ch, _) = projected.dims3()?;
        if b != 1 || ch != self.cfg.proj_dim {
            return Err(Error::ShapeMismatch(format!(
                "consumer expects (1, {}, T), got {:?}",
                self.cfg.proj_dim,
                projected.dims()
            )));
        }
        if spk.dims() != [self.cfg.speaker_dim] {
            return Err(Error::ShapeMismatch(format!("speaker embedding {:?}", spk.dims())));
        }
        let mut x = self.input.forward(projected)?;
        for block in &self.blocks {
            x = block.forward(&x, spk)?;
        }
        let global = self.bottleneck_frames(&x)?.mean(D::Minus1)?.squeeze(0)?;
        Ok(ConditioningOutput { local: x, global })
    }

    pub fn forward(&self, emb: &Tensor, spk: &Tensor, mel_len: usize) -> Result<ConditioningOutput> {
        self.consumer_forward(&self.project_reduce(emb, mel_len)?, spk)
    }
}

/// `(rows, cols)` standard-normal samples.
pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R, dtype: DType) -> Result<Tensor> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample(rand_distr::StandardNormal))
        .collect();
    Ok(Tensor::from_vec(data, (rows, cols), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Biased (V-statistic) squared MMD with a Gaussian kernel whose bandwidth
/// is the median pairwise distance of the pooled sample.
pub fn mmd_loss(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (b, g) = x.dims2()?;
    let (b2, g2) = y.dims2()?;
    if b < 2 || b2 < 2 {
        return Err(Error::BatchTooSmall { min: 2, found: b.min(b2) });
    }
    if g != g2 {
        return Err(Error::DimMismatch { expected: g, found: g2 });
    }
    let z = Tensor::cat(&[x, y], 0)?;
    let d2 = z
        .unsqueeze(1)?
        .broadcast_sub(&z.unsqueeze(0)?)?
        .sqr()?
        .sum(D::Minus1)?;
    let n = b + b2;
    let flat = d2.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let mut dists: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| flat[i][j].max(0.0).sqrt())
        .collect();
    let h = crate::dim_select::median(&mut dists);
    let h = if h > 1e-12 { h } else { 1.0 };
    let k = (d2 * (-0.5 / (h * h)))?.exp()?;
    let kxx = k.narrow(0, 0, b)?.narrow(1, 0, b)?.mean_all()?;
    let kyy = k.narrow(0, b, b2)?.narrow(1, b, b2)?.mean_all()?;
    let kxy = k.narrow(0, 0, b)?.narrow(1, b, b2)?.mean_all()?;
    Ok(((kxx + kyy)? - (kxy * 2.0)?)?)
}

fn standardized(x: &Tensor) -> Result<Tensor> {
    let centered = x.broadcast_sub(&x.mean_keepdim(0)?)?;
    let std = centered.sqr()?.mean_keepdim(0)?.sqrt()?;
    // constant columns get a zero inverse scale, hence zero correlation
    let live = std.ge(1e-12)?.to_dtype(x.dtype())?;
    let inv = live.div(&(std + (live.ones_like()? - &live)?)?)?;
    Ok(centered.broadcast_mul(&inv)?)
}

/// Mean squared Pearson correlation over every (global, encoder) coordinate
/// pair across the batch. Lies in `[0, 1]`.
pub fn mi_loss(global_batch: &Tensor, enc_summary: &Tensor) -> Result<Tensor> {
    let (b, _) = global_batch.dims2()?;
    let (b2, _) = enc_summary.dims2()?;
    if b != b2 {
        return Err(Error::LengthMismatch(b, b2));
    }
    if b < 3 {
        return Err(Error::BatchTooSmall { min: 3, found: b });
    }
    let zg = standardized(global_batch)?;
    let ze = standardized(enc_summary)?;
    let corr = (zg.t()?.matmul(&ze)? / b as f64)?;
    Ok(corr.sqr()?.mean_all()?)
}
