//! U-Net mel discriminator with spectrally normalized weights.
//!
//! The contracting path scores the slice (mean of its deepest features); the
//! expanding path reconstructs the clean mel from the augmented input. Real
//! slices are never scored un-augmented: [`disc_loss`] always routes both
//! batches through [`augment`].

use std::sync::{Arc, Mutex};

use candle_core::{Tensor, D};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io_formats::{Matrix, MEL_BANDS};
use crate::nn::{dropout, fnv1a, stream_rng, Init, Scope};

#[derive(Debug, Clone, PartialEq)]
pub struct DiscConfig {
    /// Channels after the entry convolution; doubled by each later block.
    pub base_channels: usize,
    pub depth: usize,
    pub slice_len: usize,
    pub dropout: f64,
    pub real_as_fake: f64,
    pub augment: AugmentConfig,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            depth: 4,
            slice_len: 64,
            dropout: 0.2,
            real_as_fake: 0.1,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub freq_masks: usize,
    pub max_freq_width: usize,
    pub time_masks: usize,
    pub max_time_width: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub masks_enabled: bool,
    /// Overrides the sampled diffusion step; `Some(0)` disables noising.
    pub force_step: Option<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            freq_masks: 2,
            max_freq_width: 8,
            time_masks: 2,
            max_time_width: 10,
            diffusion_steps: 20,
            beta_start: 1e-4,
            beta_end: 0.2,
            masks_enabled: true,
            force_step: None,
        }
    }
}

impl AugmentConfig {
    /// Cumulative signal retention `alpha_bar[t]` for `t = 0..=T` (index 0 is 1).
    pub fn alpha_bars(&self) -> Vec<f64> {
        let t = self.diffusion_steps;
        let mut out = Vec::with_capacity(t + 1);
        out.push(1.0);
        let mut acc = 1.0;
        for s in 0..t {
            let beta = if t == 1 {
                self.beta_start
            } else {
                self.beta_start + (self.beta_end - self.beta_start) * s as f64 / (t - 1) as f64
            };
            acc *= 1.0 - beta;
            out.push(acc);
        }
        out
    }
}

/// Power-iteration estimate of the top singular value of a row-major
/// `rows x cols` matrix, updating the persistent left/right vectors in place.
pub fn power_iteration(w: &[f32], rows: usize, cols: usize, u: &mut [f64], v: &mut [f64], iters: usize) -> f64 {
    let normalize = |x: &mut [f64]| {
        let n = x.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        x.iter_mut().for_each(|a| *a /= n);
    };
    for _ in 0..iters {
        v.iter_mut().for_each(|a| *a = 0.0);
        for r in 0..rows {
            let ur = u[r];
            for (vc, &wc) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *vc += ur * wc as f64;
            }
        }
        normalize(v);
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = w[r * cols..(r + 1) * cols]
                .iter()
                .zip(v.iter())
                .map(|(&a, b)| a as f64 * b)
                .sum();
        }
        normalize(u);
    }
    sigma_estimate(w, rows, cols, u, v)
}

fn sigma_estimate(w: &[f32], rows: usize, cols: usize, u: &[f64], v: &[f64]) -> f64 {
    (0..rows)
        .map(|r| {
            u[r] * w[r * cols..(r + 1) * cols]
                .iter()
                .zip(v)
                .map(|(&a, b)| a as f64 * b)
                .sum::<f64>()
        })
        .sum()
}

/// `w / sigma_max(w)`, with `sigma_max` estimated by `iters` power
/// iterations from the given persistent vectors.
pub fn spectral_normalize(w: &[f32], rows: usize, cols: usize, u: &mut [f64], v: &mut [f64], iters: usize) -> Vec<f32> {
    let sigma = power_iteration(w, rows, cols, u, v, iters);
    w.iter().map(|&x| (x as f64 / sigma) as f32).collect()
}

/// Persistent power-iteration state for one weight, kept in single
/// precision so checkpoints hold it exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

/// A weight reshaped to `(dim0, rest)` and divided by its estimated top
/// singular value.
#[derive(Debug, Clone)]
pub struct SpectralWeight {
    name: String,
    weight: Tensor,
    rows: usize,
    cols: usize,
    state: Arc<Mutex<SpectralState>>,
}

/// Iterations used to settle the persistent vectors when a layer is built.
const WARMUP_LIMIT: usize = 2000;

impl SpectralWeight {
    fn new(s: &Scope, leaf: &str, shape: &[usize], fan_in: usize) -> Result<Self> {
        let weight = s.get(leaf, shape, Init::FanIn(fan_in))?;
        let rows = shape[0];
        let cols: usize = shape[1..].iter().product();
        let name = s.name(leaf);
        let mut rng = stream_rng(s.seed(), &[fnv1a(&name), 0x5eed]);
        let mut u: Vec<f64> = (0..rows).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let mut v = vec![0.0; cols];
        let w = weight.flatten_all()?.to_vec1::<f32>()?;
        let mut prev = power_iteration(&w, rows, cols, &mut u, &mut v, 1);
        for _ in 0..WARMUP_LIMIT {
            let next = power_iteration(&w, rows, cols, &mut u, &mut v, 1);
            if (next - prev).abs() <= 1e-9 * next.abs() {
                break;
            }
            prev = next;
        }
        Ok(Self {
            name,
            weight,
            rows,
            cols,
            state: Arc::new(Mutex::new(SpectralState {
                u: u.iter().map(|&x| x as f32).collect(),
                v: v.iter().map(|&x| x as f32).collect(),
            })),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn raw(&self) -> &Tensor {
        &self.weight
    }

    pub fn matrix_dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn state(&self) -> SpectralState {
        self.state.lock().unwrap().clone()
    }

    pub fn set_state(&self, state: SpectralState) -> Result<()> {
        if state.u.len() != self.rows || state.v.len() != self.cols {
            return Err(Error::ShapeMismatch(format!("spectral state for {}", self.name)));
        }
        *self.state.lock().unwrap() = state;
        Ok(())
    }

    /// Advances the persistent vectors on the current weight values.
    pub fn iterate(&self, iters: usize) -> Result<f64> {
        let w = self.weight.flatten_all()?.to_vec1::<f32>()?;
        let mut st = self.state.lock().unwrap();
        let mut u: Vec<f64> = st.u.iter().map(|&x| x as f64).collect();
        let mut v: Vec<f64> = st.v.iter().map(|&x| x as f64).collect();
        let sigma = power_iteration(&w, self.rows, self.cols, &mut u, &mut v, iters);
        st.u = u.iter().map(|&x| x as f32).collect();
        st.v = v.iter().map(|&x| x as f32).collect();
        Ok(sigma)
    }

    /// Normalized weight (differentiable through `weight`, vectors held fixed).
    pub fn normalized(&self) -> Result<Tensor> {
        let st = self.state.lock().unwrap();
        let dev = self.weight.device();
        let dtype = self.weight.dtype();
        let u = Tensor::from_slice(&st.u, (1, self.rows), dev)?.to_dtype(dtype)?;
        let v = Tensor::from_slice(&st.v, (self.cols, 1), dev)?.to_dtype(dtype)?;
        let mat = self.weight.reshape((self.rows, self.cols))?;
        let sigma = u.matmul(&mat)?.matmul(&v)?.reshape(())?;
        Ok(self.weight.broadcast_div(&sigma)?)
    }
}

#[derive(Debug, Clone)]
struct SnConv {
    weight: SpectralWeight,
    bias: Tensor,
}

impl SnConv {
    fn new(s: &Scope, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        let fan_in = c_in * kernel;
        Ok(Self {
            weight: SpectralWeight::new(s, "weight", &[c_out, c_in, kernel], fan_in)?,
            bias: s.get("bias", &[c_out], Init::FanIn(fan_in))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let k = self.weight.raw().dim(2)?;
        let y = x.conv1d(&self.weight.normalized()?, k / 2, 1, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

/// Kernel-2, stride-2 transposed convolution, weight laid out `(c_in, c_out, 2)`.
#[derive(Debug, Clone)]
struct SnUpsample {
    weight: SpectralWeight,
    bias: Tensor,
}

impl SnUpsample {
    fn new(s: &Scope, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            weight: SpectralWeight::new(s, "weight", &[c_in, c_out, 2], c_in * 2)?,
            bias: s.get("bias", &[c_out], Init::FanIn(c_in * 2))?,
        })
    }

    /// `(B, c_in, L)` to `(B, c_out, 2L)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, l) = x.dims3()?;
        let w = self.weight.normalized()?;
        let c_out = w.dim(1)?;
        let xt = x.transpose(1, 2)?;
        let taps = (0..2)
            .map(|k| Ok(xt.broadcast_matmul(&w.narrow(2, k, 1)?.squeeze(2)?)?.transpose(1, 2)?))
            .collect::<Result<Vec<_>>>()?;
        let y = Tensor::stack(&taps, 3)?.reshape((b, c_out, 2 * l))?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

#[derive(Debug, Clone)]
struct DoubleConv {
    a: SnConv,
    b: SnConv,
}

impl DoubleConv {
    fn new(s: &Scope, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            a: SnConv::new(&s.pp("conv_a"), c_in, c_out, 3)?,
            b: SnConv::new(&s.pp("conv_b"), c_out, c_out, 3)?,
        })
    }

    fn forward(&self, x: &Tensor, drop: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let h = self.a.forward(x)?.gelu_erf()?;
        let h = self.b.forward(&h)?.gelu_erf()?;
        match rng {
            Some(rng) => dropout(&h, drop, rng),
            None => Ok(h),
        }
    }
}

fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, c, l) = x.dims3()?;
    Ok(x.reshape((b, c, l / 2, 2))?.max(3)?)
}

/// `score`: `(B,)`, `reconstruction`: `(B, 80, L)`.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    pub score: Tensor,
    pub reconstruction: Tensor,
}

#[derive(Debug, Clone)]
pub struct UNetDiscriminator {
    cfg: DiscConfig,
    entry: SnConv,
    down: Vec<DoubleConv>,
    up: Vec<(SnUpsample, DoubleConv)>,
    exit: SnConv,
}

impl UNetDiscriminator {
    pub fn new(s: &Scope, cfg: &DiscConfig) -> Result<Self> {
        let widths: Vec<usize> = (0..cfg.depth).map(|i| cfg.base_channels << i).collect();
        let mut down = Vec::with_capacity(cfg.depth);
        let mut c_in = cfg.base_channels;
        for (i, &w) in widths.iter().enumerate() {
            down.push(DoubleConv::new(&s.pp(&format!("down{i}")), c_in, w)?);
            c_in = w;
        }
        let mut up = Vec::with_capacity(cfg.depth);
        for i in (0..cfg.depth).rev() {
            let skip = widths[i];
            let out = if i == 0 { cfg.base_channels } else { widths[i - 1] };
            let u = s.pp(&format!("up{i}"));
            up.push((
                SnUpsample::new(&u.pp("upsample"), c_in, skip)?,
                DoubleConv::new(&u.pp("convs"), 2 * skip, out)?,
            ));
            c_in = out;
        }
        Ok(Self {
            cfg: cfg.clone(),
            entry: SnConv::new(&s.pp("entry"), MEL_BANDS, cfg.base_channels, 3)?,
            down,
            up,
            exit: SnConv::new(&s.pp("exit"), cfg.base_channels, MEL_BANDS, 1)?,
        })
    }

    pub fn config(&self) -> &DiscConfig {
        &self.cfg
    }

    pub fn spectral_weights(&self) -> Vec<&SpectralWeight> {
        let mut out = vec![&self.entry.weight];
        for d in &self.down {
            out.push(&d.a.weight);
            out.push(&d.b.weight);
        }
        for (u, c) in &self.up {
            out.push(&u.weight);
            out.push(&c.a.weight);
            out.push(&c.b.weight);
        }
        out.push(&self.exit.weight);
        out
    }

    /// One power-iteration step on every weight (done once per training step).
    pub fn refresh_spectral(&self, iters: usize) -> Result<()> {
        for w in self.spectral_weights() {
            w.iterate(iters)?;
        }
        Ok(())
    }

    /// Temporal length of the deepest features for a slice of `len` frames.
    pub fn bottleneck_len(&self, len: usize) -> usize {
        len >> self.cfg.depth
    }

    /// `x`: `(B, 80, L)`. Dropout is active iff `rng` is given.
    pub fn forward(&self, x: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<DiscOutput> {
        let (_, bands, len) = x.dims3()?;
        let unit = 1usize << self.cfg.depth;
        if len == 0 || len % unit != 0 {
            return Err(Error::BadSliceLength(len));
        }
        if bands != MEL_BANDS {
            return Err(Error::ShapeMismatch(format!("discriminator input {:?}", x.dims())));
        }
        let mut h = self.entry.forward(x)?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for block in &self.down {
            let f = block.forward(&h, self.cfg.dropout, rng.as_deref_mut())?;
            h = max_pool2(&f)?;
            skips.push(f);
        }
        let score = h.mean(D::Minus1)?.mean(D::Minus1)?;
        for (upsample, convs) in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let merged = Tensor::cat(&[upsample.forward(&h)?, skip], 1)?;
            h = convs.forward(&merged, self.cfg.dropout, rng.as_deref_mut())?;
        }
        Ok(DiscOutput {
            score,
            reconstruction: self.exit.forward(&h)?,
        })
    }
}

/// Uniform random excerpt of `len` frames from a `(frames, 80)` mel, as an
/// `(80, len)` matrix. Shorter mels are zero padded at the end.
pub fn sample_slice(mel: &Matrix, len: usize, rng: &mut impl Rng) -> (usize, Matrix) {
    let frames = mel.rows();
    let offset = if frames > len { rng.random_range(0..=frames - len) } else { 0 };
    let mut data = vec![0.0f32; MEL_BANDS * len];
    for t in 0..len.min(frames - offset) {
        for (b, &v) in mel.row(offset + t).iter().enumerate() {
            data[b * len + t] = v;
        }
    }
    (offset, Matrix::new(MEL_BANDS, len, data).expect("sized above"))
}

/// SpecAugment masks followed by forward-diffusion noising, per batch item.
/// Returns the augmented batch and the diffusion step used for each item.
pub fn augment(batch: &Tensor, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<(Tensor, Vec<usize>)> {
    let (b, bands, len) = batch.dims3()?;
    let alpha = cfg.alpha_bars();
    let mut mask = vec![1.0f32; b * bands * len];
    let mut signal = Vec::with_capacity(b);
    let mut noise_scale = Vec::with_capacity(b);
    let mut steps = Vec::with_capacity(b);
    for i in 0..b {
        if cfg.masks_enabled {
            let m = &mut mask[i * bands * len..(i + 1) * bands * len];
            for _ in 0..cfg.freq_masks {
                let w = rng.random_range(0..=cfg.max_freq_width.min(bands));
                let f0 = rng.random_range(0..=bands - w);
                for f in f0..f0 + w {
                    m[f * len..(f + 1) * len].iter_mut().for_each(|x| *x = 0.0);
                }
            }
            for _ in 0..cfg.time_masks {
                let w = rng.random_range(0..=cfg.max_time_width.min(len));
                let t0 = rng.random_range(0..=len - w);
                for f in 0..bands {
                    m[f * len + t0..f * len + t0 + w].iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
        let t = match cfg.force_step {
            Some(t) => t.min(cfg.diffusion_steps),
            None => rng.random_range(1..=cfg.diffusion_steps),
        };
        steps.push(t);
        signal.push(alpha[t].sqrt() as f32);
        noise_scale.push((1.0 - alpha[t]).sqrt() as f32);
    }
    let dev = batch.device();
    let dtype = batch.dtype();
    let mask = Tensor::from_vec(mask, (b, bands, len), dev)?.to_dtype(dtype)?;
    let signal = Tensor::from_vec(signal, (b, 1, 1), dev)?.to_dtype(dtype)?;
    let mut out = (batch * mask)?.broadcast_mul(&signal)?;
    if noise_scale.iter().any(|&s| s > 0.0) {
        let eps: Vec<f32> = (0..b * bands * len)
            .map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal))
            .collect();
        let eps = Tensor::from_vec(eps, (b, bands, len), dev)?.to_dtype(dtype)?;
        let scale = Tensor::from_vec(noise_scale, (b, 1, 1), dev)?.to_dtype(dtype)?;
        out = (out + eps.broadcast_mul(&scale)?)?;
    }
    Ok((out, steps))
}

/// Hinge discriminator objective. `real_labels[i]` is false when real item
/// `i` is presented as fake.
pub fn hinge_d(real_scores: &Tensor, real_labels: &[bool], fake_scores: &Tensor) -> Result<Tensor> {
    let sign: Vec<f32> = real_labels.iter().map(|&r| if r { -1.0 } else { 1.0 }).collect();
    let sign = Tensor::from_vec(sign, real_labels.len(), real_scores.device())?.to_dtype(real_scores.dtype())?;
    let real_term = (real_scores * sign)?.affine(1.0, 1.0)?.relu()?.mean_all()?;
    let fake_term = fake_scores.affine(1.0, 1.0)?.relu()?.mean_all()?;
    Ok((real_term + fake_term)?)
}

/// L1 + L2 between a reconstruction and its clean target.
pub fn reconstruction_loss(recon: &Tensor, clean: &Tensor) -> Result<Tensor> {
    let diff = (recon - clean)?;
    Ok((diff.abs()?.mean_all()? + diff.sqr()?.mean_all()?)?)
}

#[derive(Debug, Clone)]
pub struct DiscLoss {
    /// Objective minimized by the discriminator.
    pub d_loss: Tensor,
    pub hinge: Tensor,
    pub reconstruction: Tensor,
    /// Mean fake score; the generator maximizes it.
    pub fake_score: Tensor,
}

/// Scores augmented real and fake batches `(B, 80, L)`. The fake batch is
/// used as given: detach it for the discriminator update and keep it
/// attached for the generator's adversarial term. Randomness comes from
/// streams keyed by `(seed, step)`.
pub fn disc_loss(
    disc: &UNetDiscriminator,
    real: &Tensor,
    fake: &Tensor,
    seed: u64,
    step: u64,
    train: bool,
) -> Result<DiscLoss> {
    let b = real.dim(0)?;
    if b == 0 || fake.dim(0)? == 0 {
        return Err(Error::EmptyBatch);
    }
    let cfg = disc.config();
    let mut aug_rng = stream_rng(seed, &[step, fnv1a("augment-real")]);
    let (real_aug, _) = augment(real, &cfg.augment, &mut aug_rng)?;
    let mut aug_rng = stream_rng(seed, &[step, fnv1a("augment-fake")]);
    let (fake_aug, _) = augment(fake, &cfg.augment, &mut aug_rng)?;

    let mut label_rng = stream_rng(seed, &[step, fnv1a("real-as-fake")]);
    let labels: Vec<bool> = (0..b).map(|_| label_rng.random::<f64>() >= cfg.real_as_fake).collect();

    let mut drop_rng = stream_rng(seed, &[step, fnv1a("dropout")]);
    let real_out = disc.forward(&real_aug, train.then_some(&mut drop_rng))?;
    let fake_out = disc.forward(&fake_aug, train.then_some(&mut drop_rng))?;
    let hinge = hinge_d(&real_out.score, &labels, &fake_out.score)?;
    let reconstruction = reconstruction_loss(&real_out.reconstruction, real)?;
    Ok(DiscLoss {
        d_loss: (&hinge + &reconstruction)?,
        hinge,
        reconstruction,
        fake_score: fake_out.score.mean_all()?,
    })
}

/// Mean augmented score of a fake batch, for the generator's adversarial
/// term. Uses the same augmentation stream as [`disc_loss`] and its own
/// dropout stream.
pub fn generator_score(disc: &UNetDiscriminator, fake: &Tensor, seed: u64, step: u64, train: bool) -> Result<Tensor> {
    if fake.dim(0)? == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut aug_rng = stream_rng(seed, &[step, fnv1a("augment-fake")]);
    let (fake_aug, _) = augment(fake, &disc.config().augment, &mut aug_rng)?;
    let mut drop_rng = stream_rng(seed, &[step, fnv1a("dropout-generator")]);
    Ok(disc.forward(&fake_aug, train.then_some(&mut drop_rng))?.score.mean_all()?)
}

/// Shuffled copy of `0..n`, used to pick batch members.
pub fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
