//! Small neural-network toolkit on top of candle tensors: a seeded parameter
//! store, the layers the models share, and an Adam optimizer whose state can
//! be checkpointed.
//!
//! Sequence tensors follow the convolution layout `(batch, channels, time)`
//! unless a function says otherwise.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent RNG stream keyed by `(seed, tags...)`. Streams never depend on
/// how many numbers other streams have drawn.
pub fn stream_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let key = tags.iter().fold(splitmix(seed), |h, &t| splitmix(h ^ t));
    ChaCha8Rng::seed_from_u64(key)
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    FanIn(usize),
    Uniform(f64),
    Normal(f64),
    Const(f64),
}

/// Named trainable variables, created deterministically from a seed and the
/// variable's full name.
#[derive(Clone)]
pub struct ParamStore {
    seed: u64,
    device: Device,
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            device: Device::Cpu,
            vars: Arc::new(Mutex::new(BTreeMap::new())),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn get_or_create(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut vars = self.vars.lock().unwrap();
        if let Some(v) = vars.get(name) {
            if v.dims() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name} exists with shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let count: usize = shape.iter().product();
        let mut rng = stream_rng(self.seed, &[fnv1a(name)]);
        let data: Vec<f32> = match init {
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..count).map(|_| rng.random_range(-b..b) as f32).collect()
            }
            Init::Uniform(b) => (0..count).map(|_| rng.random_range(-b..b) as f32).collect(),
            Init::Normal(std) => (0..count)
                .map(|_| (std * rng.sample::<f64, _>(rand_distr::StandardNormal)) as f32)
                .collect(),
            Init::Const(c) => vec![c as f32; count],
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        vars.insert(name.to_string(), var);
        Ok(t)
    }

    /// Snapshot of all variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    pub fn num_params(&self) -> usize {
        self.vars.lock().unwrap().values().map(|v| v.elem_count()).sum()
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn fingerprint(&self) -> Result<u64> {
        self.fingerprint_where(|_| true)
    }

    /// [`ParamStore::fingerprint`] restricted to names accepted by `keep`.
    pub fn fingerprint_where(&self, keep: impl Fn(&str) -> bool) -> Result<u64> {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (name, v) in self.vars().into_iter().filter(|(n, _)| keep(n)) {
            h = splitmix(h ^ fnv1a(&name));
            for x in v.as_tensor().flatten_all()?.to_vec1::<f32>()? {
                h = (h ^ x.to_bits() as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
        Ok(h)
    }
}

/// A name prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: &str) -> Scope {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn get(&self, leaf: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.get_or_create(&self.name(leaf), shape, init)
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn seed(&self) -> u64 {
        self.store.seed
    }
}

pub fn mish(x: &Tensor) -> Result<Tensor> {
    // softplus(x) = relu(x) + ln(1 + e^{-|x|})
    let sp = (x.relu()? + x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?)?;
    Ok((x * sp.tanh()?)?)
}

pub fn swish(x: &Tensor) -> Result<Tensor> {
    Ok((x * candle_nn::ops::sigmoid(x)?)?)
}

/// Inverted dropout with a caller-supplied RNG so masks are reproducible.
pub fn dropout(x: &Tensor, p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &Scope, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: s.get("weight", &[fan_out, fan_in], Init::FanIn(fan_in))?,
            bias: Some(s.get("bias", &[fan_out], Init::FanIn(fan_in))?),
        })
    }

    pub fn no_bias(s: &Scope, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: s.get("weight", &[fan_out, fan_in], Init::FanIn(fan_in))?,
            bias: None,
        })
    }

    /// Applies to the last dimension of any-rank input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zeros,
    Replicate,
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    padding: Padding,
}

impl Conv1d {
    /// Stride-1 "same" convolution; `kernel` must be odd.
    pub fn new(s: &Scope, c_in: usize, c_out: usize, kernel: usize, padding: Padding) -> Result<Self> {
        let fan_in = c_in * kernel;
        Ok(Self {
            weight: s.get("weight", &[c_out, c_in, kernel], Init::FanIn(fan_in))?,
            bias: s.get("bias", &[c_out], Init::FanIn(fan_in))?,
            kernel,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let half = self.kernel / 2;
        let y = match self.padding {
            Padding::Zeros => x.conv1d(&self.weight, half, 1, 1, 1)?,
            Padding::Replicate => replicate_pad(x, half)?.conv1d(&self.weight, 0, 1, 1, 1)?,
        };
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

pub fn replicate_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let len = x.dim(D::Minus1)?;
    let first = x.narrow(D::Minus1, 0, 1)?;
    let last = x.narrow(D::Minus1, len - 1, 1)?;
    let mut parts = vec![first; pad];
    parts.push(x.clone());
    parts.extend(std::iter::repeat_n(last, pad));
    Ok(Tensor::cat(&parts, D::Minus1)?)
}

/// Normalization over the last dimension.
pub fn normalize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(s: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.get("gamma", &[dim], Init::Const(1.0))?,
            beta: s.get("beta", &[dim], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(normalize_last(x, 1e-5)?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }

    /// Layer norm over channels of a `(batch, channels, time)` tensor.
    pub fn forward_channels(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(&x.transpose(1, 2)?)?.transpose(1, 2)?)
    }
}

/// Single-direction LSTM over `(batch, time, features)`.
#[derive(Debug, Clone)]
pub struct Lstm {
    w_ih: Tensor,
    w_hh: Tensor,
    bias: Tensor,
    hidden: usize,
    reverse: bool,
}

impl Lstm {
    pub fn new(s: &Scope, input: usize, hidden: usize, reverse: bool) -> Result<Self> {
        let init = Init::FanIn(hidden);
        Ok(Self {
            w_ih: s.get("w_ih", &[4 * hidden, input], init)?,
            w_hh: s.get("w_hh", &[4 * hidden, hidden], init)?,
            bias: s.get("bias", &[4 * hidden], init)?,
            hidden,
            reverse,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t_len, _) = x.dims3()?;
        let h_dim = self.hidden;
        let xw = x.broadcast_matmul(&self.w_ih.t()?)?.broadcast_add(&self.bias)?;
        let w_hh_t = self.w_hh.t()?;
        let mut h = Tensor::zeros((b, h_dim), x.dtype(), x.device())?;
        let mut c = h.clone();
        let mut outs = vec![None; t_len];
        let order: Vec<usize> = if self.reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for t in order {
            let gates = (xw.narrow(1, t, 1)?.squeeze(1)? + h.matmul(&w_hh_t)?)?;
            let chunks = gates.chunk(4, 1)?;
            let i = candle_nn::ops::sigmoid(&chunks[0])?;
            let f = candle_nn::ops::sigmoid(&chunks[1])?;
            let g = chunks[2].tanh()?;
            let o = candle_nn::ops::sigmoid(&chunks[3])?;
            c = ((f * &c)? + (i * g)?)?;
            h = (o * c.tanh()?)?;
            outs[t] = Some(h.clone());
        }
        let outs: Vec<Tensor> = outs.into_iter().map(|o| o.expect("every step visited")).collect();
        Ok(Tensor::stack(&outs, 1)?)
    }
}

/// `(dst, src)` matrix of linear-interpolation weights with half-pixel
/// alignment: destination frame `j` samples source position
/// `(j + 0.5) * src / dst - 0.5`, clamped to the valid range.
pub fn linear_interp_weights(src: usize, dst: usize) -> Vec<f32> {
    let mut w = vec![0.0f32; dst * src];
    let scale = src as f64 / dst as f64;
    for j in 0..dst {
        let pos = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let frac = pos - lo as f64;
        w[j * src + lo] += (1.0 - frac) as f32;
        w[j * src + hi] += frac as f32;
    }
    w
}

/// Resamples the time axis of `(batch, channels, time)` to `dst` frames.
pub fn interpolate_time(x: &Tensor, dst: usize) -> Result<Tensor> {
    let src = x.dim(2)?;
    if src == dst {
        return Ok(x.clone());
    }
    let w = Tensor::from_vec(linear_interp_weights(src, dst), (dst, src), x.device())?.to_dtype(x.dtype())?;
    Ok(x.broadcast_matmul(&w.t()?)?)
}

/// First-order adaptive-moment optimizer with inspectable state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// One update over every variable in `params` that has a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &candle_core::backprop::GradStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in params.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // gradients carry the backward graph; keeping them would chain every step's graph
            let g = g.detach();
            let g = &g;
            let m = match self.first.get(&name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.second.get(&name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?.detach())?;
            self.first.insert(name.clone(), m.detach());
            self.second.insert(name, v.detach());
        }
        Ok(())
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
