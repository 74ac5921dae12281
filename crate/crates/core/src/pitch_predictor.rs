//! Auxiliary pitch head: a small Conformer stack over mel frames that
//! yields a 64-dim pitch representation and a scalar pitch track.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::io_formats::MEL_BANDS;
use crate::nn::{swish, Init, LayerNorm, Linear, Scope};
use crate::pitch_objective::pitch_loss_rows;

#[derive(Debug, Clone, PartialEq)]
pub struct PitchPredictorConfig {
    pub dim: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub conv_kernel: usize,
}

impl Default for PitchPredictorConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 4,
            ff_dim: 128,
            heads: 8,
            conv_kernel: 15,
        }
    }
}

/// `f0`: `(1, M)`, `repr`: `(1, M, dim)`.
#[derive(Debug, Clone)]
pub struct PitchPrediction {
    pub f0: Tensor,
    pub repr: Tensor,
}

#[derive(Debug, Clone)]
struct FeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(s: &Scope, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&s.pp("norm"), dim)?,
            up: Linear::new(&s.pp("up"), dim, hidden)?,
            down: Linear::new(&s.pp("down"), hidden, dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&swish(&self.up.forward(&self.norm.forward(x)?)?)?)
    }
}

/// Sinusoidal encodings for relative offsets `len-1, len-2, ..., -(len-1)`.
fn relative_table(len: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let rows = 2 * len - 1;
    let mut data = Vec::with_capacity(rows * dim);
    for r in 0..rows {
        let offset = (len - 1) as f64 - r as f64;
        for k in 0..dim / 2 {
            let angle = offset * 10000f64.powf(-2.0 * k as f64 / dim as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Ok(Tensor::from_vec(data, (rows, dim), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Multi-head self-attention with relative sinusoidal position scores
/// (content bias `u`, position bias `v`).
#[derive(Debug, Clone)]
struct RelativeAttention {
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    pos: Linear,
    out: Linear,
    bias_u: Tensor,
    bias_v: Tensor,
    heads: usize,
}

impl RelativeAttention {
    fn new(s: &Scope, dim: usize, heads: usize) -> Result<Self> {
        let dk = dim / heads;
        Ok(Self {
            norm: LayerNorm::new(&s.pp("norm"), dim)?,
            q: Linear::new(&s.pp("q"), dim, dim)?,
            k: Linear::new(&s.pp("k"), dim, dim)?,
            v: Linear::new(&s.pp("v"), dim, dim)?,
            pos: Linear::no_bias(&s.pp("pos"), dim, dim)?,
            out: Linear::new(&s.pp("out"), dim, dim)?,
            bias_u: s.get("bias_u", &[heads, 1, dk], Init::Uniform(0.1))?,
            bias_v: s.get("bias_v", &[heads, 1, dk], Init::Uniform(0.1))?,
            heads,
        })
    }

    /// `x`: `(1, M, dim)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, m, dim) = x.dims3()?;
        let h = self.heads;
        let dk = dim / h;
        let x = self.norm.forward(x)?;
        let split = |t: Tensor, len: usize| -> Result<Tensor> {
            Ok(t.reshape((len, h, dk))?.transpose(0, 1)?.contiguous()?)
        };
        let q = split(self.q.forward(&x)?.squeeze(0)?, m)?;
        let k = split(self.k.forward(&x)?.squeeze(0)?, m)?;
        let v = split(self.v.forward(&x)?.squeeze(0)?, m)?;
        let p = split(self.pos.forward(&relative_table(m, dim, x.dtype())?)?, 2 * m - 1)?;

        let content = q.broadcast_add(&self.bias_u)?.matmul(&k.t()?)?;
        let position = q.broadcast_add(&self.bias_v)?.matmul(&p.t()?)?;
        // row i, column j reads the table entry for offset i - j
        let idx: Vec<u32> = (0..m)
            .flat_map(|i| (0..m).map(move |j| (m - 1 + j - i) as u32))
            .collect();
        let idx = Tensor::from_vec(idx, (1, m, m), x.device())?
            .broadcast_as((h, m, m))?
            .contiguous()?;
        let position = position.contiguous()?.gather(&idx, 2)?;
        let scores = ((content + position)? / (dk as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = attn.matmul(&v)?.transpose(0, 1)?.reshape((1, m, dim))?;
        self.out.forward(&ctx)
    }
}

#[derive(Debug, Clone)]
struct ConvModule {
    norm: LayerNorm,
    expand: Linear,
    depthwise: Tensor,
    depthwise_bias: Tensor,
    mid_norm: LayerNorm,
    project: Linear,
    kernel: usize,
}

impl ConvModule {
    fn new(s: &Scope, dim: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&s.pp("norm"), dim)?,
            expand: Linear::new(&s.pp("expand"), dim, 2 * dim)?,
            depthwise: s.get("depthwise.weight", &[dim, kernel], Init::FanIn(kernel))?,
            depthwise_bias: s.get("depthwise.bias", &[dim], Init::FanIn(kernel))?,
            mid_norm: LayerNorm::new(&s.pp("mid_norm"), dim)?,
            project: Linear::new(&s.pp("project"), dim, dim)?,
            kernel,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, m, dim) = x.dims3()?;
        let h = self.expand.forward(&self.norm.forward(x)?)?;
        let gated = (h.narrow(2, 0, dim)? * candle_nn::ops::sigmoid(&h.narrow(2, dim, dim)?)?)?;
        // depthwise convolution along time, zero padded
        let half = self.kernel / 2;
        let padded = gated.pad_with_zeros(1, half, half)?;
        let mut acc = self.depthwise_bias.reshape((1, 1, dim))?.broadcast_as((1, m, dim))?.contiguous()?;
        for k in 0..self.kernel {
            let w = self.depthwise.narrow(1, k, 1)?.reshape((1, 1, dim))?;
            acc = (acc + padded.narrow(1, k, m)?.broadcast_mul(&w)?)?;
        }
        self.project.forward(&swish(&self.mid_norm.forward(&acc)?)?)
    }
}

#[derive(Debug, Clone)]
struct ConformerLayer {
    ff1: FeedForward,
    attn: RelativeAttention,
    conv: ConvModule,
    ff2: FeedForward,
    norm: LayerNorm,
}

impl ConformerLayer {
    fn new(s: &Scope, cfg: &PitchPredictorConfig) -> Result<Self> {
        Ok(Self {
            ff1: FeedForward::new(&s.pp("ff1"), cfg.dim, cfg.ff_dim)?,
            attn: RelativeAttention::new(&s.pp("attn"), cfg.dim, cfg.heads)?,
            conv: ConvModule::new(&s.pp("conv"), cfg.dim, cfg.conv_kernel)?,
            ff2: FeedForward::new(&s.pp("ff2"), cfg.dim, cfg.ff_dim)?,
            norm: LayerNorm::new(&s.pp("norm"), cfg.dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + (self.ff1.forward(x)? * 0.5)?)?;
        let x = (&x + self.attn.forward(&x)?)?;
        let x = (&x + self.conv.forward(&x)?)?;
        let x = (&x + (self.ff2.forward(&x)? * 0.5)?)?;
        self.norm.forward(&x)
    }
}

#[derive(Debug, Clone)]
pub struct PitchPredictor {
    cfg: PitchPredictorConfig,
    input: Linear,
    layers: Vec<ConformerLayer>,
    output: Linear,
}

impl PitchPredictor {
    pub fn new(s: &Scope, cfg: &PitchPredictorConfig) -> Result<Self> {
        if cfg.dim % cfg.heads != 0 || cfg.dim % 2 != 0 {
            return Err(Error::Config(format!(
                "pitch dim {} must be even and divisible by {} heads",
                cfg.dim, cfg.heads
            )));
        }
        Ok(Self {
            cfg: cfg.clone(),
            input: Linear::new(&s.pp("input"), MEL_BANDS, cfg.dim)?,
            layers: (0..cfg.layers)
                .map(|i| ConformerLayer::new(&s.pp(&format!("layer{i}")), cfg))
                .collect::<Result<_>>()?,
            output: Linear::new(&s.pp("output"), cfg.dim, 1)?,
        })
    }

    pub fn config(&self) -> &PitchPredictorConfig {
        &self.cfg
    }

    /// `mel`: `(1, M, 80)`.
    pub fn predict(&self, mel: &Tensor) -> Result<PitchPrediction> {
        let (b, m, bands) = mel.dims3()?;
        if b != 1 || bands != MEL_BANDS || m == 0 {
            return Err(Error::ShapeMismatch(format!("pitch predictor input {:?}", mel.dims())));
        }
        let mut x = self.input.forward(mel)?;
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        let f0 = self.output.forward(&x)?.squeeze(2)?;
        Ok(PitchPrediction { f0, repr: x })
    }
}

/// Pitch loss applied to every representation channel as a contour,
/// averaged over channels. Inputs are `(1, M, C)` or `(M, C)`.
pub fn repr_loss(repr_gt: &Tensor, repr_gen: &Tensor) -> Result<Tensor> {
    if repr_gt.dims() != repr_gen.dims() {
        return Err(Error::ShapeMismatch(format!(
            "representations {:?} vs {:?}",
            repr_gt.dims(),
            repr_gen.dims()
        )));
    }
    let as_rows = |t: &Tensor| -> Result<Tensor> {
        let t = if t.rank() == 3 { t.squeeze(0)? } else { t.clone() };
        Ok(t.t()?.contiguous()?)
    };
    Ok(pitch_loss_rows(&as_rows(repr_gt)?, &as_rows(repr_gen)?)?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::standard_normal;
    use crate::nn::{scalar, stream_rng, ParamStore};
    use crate::pitch_objective::{pitch_loss, LOG_FLOOR};

    #[test]
    fn relative_index_layout() {
        // entry r encodes offset len-1-r; (i, j) must pick offset i - j
        let m = 4;
        for i in 0..m {
            for j in 0..m {
                let r = m - 1 + j - i;
                assert_eq!((m - 1) as i64 - r as i64, i as i64 - j as i64);
            }
        }
    }

    #[test]
    fn shapes() {
        let store = ParamStore::new(1);
        let cfg = PitchPredictorConfig {
            layers: 1,
            ..Default::default()
        };
        let p = PitchPredictor::new(&store.root().pp("pitch"), &cfg).unwrap();
        for m in [1usize, 15, 64] {
            let mel = standard_normal(m, 80, &mut stream_rng(m as u64, &[]), DType::F32)
                .unwrap()
                .unsqueeze(0)
                .unwrap();
            let out = p.predict(&mel).unwrap();
            assert_eq!(out.f0.dims(), &[1, m]);
            assert_eq!(out.repr.dims(), &[1, m, 64]);
        }
    }

    #[test]
    fn repr_loss_per_channel() {
        let a = standard_normal(12, 64, &mut stream_rng(3, &[]), DType::F64).unwrap();
        assert!((scalar(&repr_loss(&a, &a).unwrap()).unwrap() - LOG_FLOOR.ln()).abs() < 1e-12);

        let mut rows = a.to_vec2::<f64>().unwrap();
        let original: Vec<f64> = rows.iter().map(|r| r[5]).collect();
        for (t, r) in rows.iter_mut().enumerate() {
            r[5] += 0.3 * (t as f64).sin() + 0.1;
        }
        let changed: Vec<f64> = rows.iter().map(|r| r[5]).collect();
        let b = Tensor::new(rows, &candle_core::Device::Cpu).unwrap();
        let diff = pitch_loss(&original, &changed).unwrap();
        let expect = (63.0 * LOG_FLOOR.ln() + diff) / 64.0;
        let got = scalar(&repr_loss(&a, &b).unwrap()).unwrap();
        assert!((got - expect).abs() < 1e-12 * expect.abs());
        assert_eq!(got, scalar(&repr_loss(&b, &a).unwrap()).unwrap());
        assert!(repr_loss(&a, &b.narrow(0, 0, 11).unwrap()).is_err());
    }

    fn analytic_count(d: usize, ff: usize, k: usize, layers: usize) -> usize {
        let norm = 2 * d;
        let feed_forward = norm + (d * ff + ff) + (ff * d + d);
        let attention = norm + 4 * (d * d + d) + d * d + 2 * d;
        let conv = norm + (d * 2 * d + 2 * d) + (d * k + d) + norm + (d * d + d);
        let layer = 2 * feed_forward + attention + conv + norm;
        (80 * d + d) + layers * layer + (d + 1)
    }

    #[test]
    fn parameter_count_matches_formula() {
        let store = ParamStore::new(1);
        PitchPredictor::new(&store.root().pp("pitch"), &PitchPredictorConfig::default()).unwrap();
        assert_eq!(store.num_params(), analytic_count(64, 128, 15, 4));
    }
}
