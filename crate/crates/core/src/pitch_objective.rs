//! Multi-resolution pitch comparison loss.
//!
//! Both contours are smoothed by non-overlapping block means at every proper
//! divisor of their length; the smoothed series are compared in the
//! frequency domain and the summed complex-modulus distance is taken through
//! a log:
//!
//! ```text
//! loss = ln(eps + sum_i sum_k |DFT(means(gt, d_i))[k] - DFT(means(gen, d_i))[k]|)
//! ```
//!
//! [`pitch_loss_grad`] gives the exact gradient with respect to the
//! generated contour, and [`pitch_loss_rows`] exposes the loss as an
//! autograd-aware tensor op for training.

use std::cell::RefCell;
use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};
use num_complex::Complex64;
use rand::Rng;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Floor inside the logarithm; a perfect match evaluates to `ln(LOG_FLOOR)`.
pub const LOG_FLOOR: f64 = 1e-8;
pub const PITCH_SCALE: f32 = 100.0;
pub const PITCH_NOISE: f32 = 0.01;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Window sizes used for smoothing a contour of length `n`: every `d` with
/// `1 < d < n` dividing `n`, or `[n]` when there is none.
pub fn proper_divisors(n: usize) -> Vec<usize> {
    let mut divs: Vec<usize> = (2..n).filter(|d| n % d == 0).collect();
    if divs.is_empty() {
        divs.push(n);
    }
    divs
}

pub fn windowed_means(signal: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || signal.len() % window != 0 {
        return Err(Error::NonDividingWindow {
            window,
            len: signal.len(),
        });
    }
    let w = window as f64;
    Ok(signal
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / w)
        .collect())
}

/// Full, unnormalized forward DFT.
pub fn dft(series: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = series.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    if !buf.is_empty() {
        plan(buf.len(), false).process(&mut buf);
    }
    buf
}

fn check_pair(gt: &[f64], gen: &[f64]) -> Result<()> {
    if gt.len() != gen.len() {
        return Err(Error::LengthMismatch(gt.len(), gen.len()));
    }
    if gt.len() < 2 {
        return Err(Error::EmptySequence);
    }
    Ok(())
}

/// Per-window spectra difference `DFT(means(gt)) - DFT(means(gen))`, plus
/// the per-bin operand magnitude used to tell true zeros from rounding noise.
fn spectral_gaps(gt: &[f64], gen: &[f64]) -> Vec<(usize, Vec<Complex64>, Vec<f64>)> {
    proper_divisors(gt.len())
        .into_iter()
        .map(|w| {
            let a = dft(&windowed_means(gt, w).expect("divisor"));
            let b = dft(&windowed_means(gen, w).expect("divisor"));
            let scale = a.iter().zip(&b).map(|(x, y)| x.norm() + y.norm()).collect();
            let gap = a.into_iter().zip(b).map(|(x, y)| x - y).collect();
            (w, gap, scale)
        })
        .collect()
}

fn gap_sum(gaps: &[(usize, Vec<Complex64>, Vec<f64>)]) -> f64 {
    gaps.iter()
        .flat_map(|(_, g, _)| g.iter())
        .map(|z| z.norm())
        .sum()
}

pub fn pitch_loss(gt: &[f64], gen: &[f64]) -> Result<f64> {
    check_pair(gt, gen)?;
    Ok((LOG_FLOOR + gap_sum(&spectral_gaps(gt, gen))).ln())
}

/// Gradient of [`pitch_loss`] with respect to `gen`. Bins whose gap is zero
/// (up to rounding of the operands) contribute the zero subgradient.
pub fn pitch_loss_grad(gt: &[f64], gen: &[f64]) -> Result<Vec<f64>> {
    check_pair(gt, gen)?;
    let gaps = spectral_gaps(gt, gen);
    let total = LOG_FLOOR + gap_sum(&gaps);
    let mut grad = vec![0.0; gen.len()];
    for (w, gap, scale) in &gaps {
        let m = gap.len();
        // d|G_k|/d means_gen[t] = -Re(G_k e^{+2 pi i k t / m}) / |G_k|,
        // i.e. minus the unnormalized inverse DFT of the unit phasors.
        let mut phasors: Vec<Complex64> = gap
            .iter()
            .zip(scale)
            .map(|(g, s)| {
                let r = g.norm();
                if r <= 1e-12 * s || r == 0.0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    g / r
                }
            })
            .collect();
        plan(m, true).process(&mut phasors);
        let inv_w = 1.0 / *w as f64;
        for (t, p) in phasors.iter().enumerate() {
            let g = -p.re * inv_w / total;
            for s in &mut grad[t * w..(t + 1) * w] {
                *s += g;
            }
        }
    }
    Ok(grad)
}

/// Hz to model units (`/100`), with optional i.i.d. uniform jitter in
/// `[-0.01, 0.01)` per frame.
pub fn normalize_pitch<R: Rng + ?Sized>(f0_hz: &[f32], noise: Option<&mut R>) -> Vec<f32> {
    let scaled = f0_hz.iter().map(|&f| f / PITCH_SCALE);
    match noise {
        None => scaled.collect(),
        Some(rng) => scaled
            .map(|v| v + rng.random_range(-PITCH_NOISE..PITCH_NOISE))
            .collect(),
    }
}

/// Row-wise pitch loss over two `(rows, n)` tensors, returning `(rows,)`.
/// Differentiable in both arguments.
pub fn pitch_loss_rows(gt: &Tensor, gen: &Tensor) -> Result<Tensor> {
    let (r1, n1) = gt.dims2()?;
    let (r2, n2) = gen.dims2()?;
    if r1 != r2 || n1 != n2 {
        return Err(Error::ShapeMismatch(format!("pitch rows {r1}x{n1} vs {r2}x{n2}")));
    }
    if n1 < 2 {
        return Err(Error::EmptySequence);
    }
    Ok(gt.contiguous()?.apply_op2(&gen.contiguous()?, RowPitchLoss)?)
}

struct RowPitchLoss;

fn rows_f64(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(Vec<f64>, usize, usize)> {
    let (rows, n) = layout.shape().dims2()?;
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("pitch loss expects contiguous input".into()))?;
    let data = match storage {
        CpuStorage::F32(v) => v[start..end].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[start..end].to_vec(),
        _ => candle_core::bail!("pitch loss supports f32/f64 only"),
    };
    Ok((data, rows, n))
}

fn to_candle(e: Error) -> candle_core::Error {
    candle_core::Error::Msg(e.to_string())
}

impl CustomOp2 for RowPitchLoss {
    fn name(&self) -> &'static str {
        "row-pitch-loss"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (a, rows, n) = rows_f64(s1, l1)?;
        let (b, _, _) = rows_f64(s2, l2)?;
        let losses = (0..rows)
            .map(|r| pitch_loss(&a[r * n..(r + 1) * n], &b[r * n..(r + 1) * n]))
            .collect::<Result<Vec<f64>>>()
            .map_err(to_candle)?;
        let out = match s1 {
            CpuStorage::F64(_) => CpuStorage::F64(losses),
            _ => CpuStorage::F32(losses.into_iter().map(|x| x as f32).collect()),
        };
        Ok((out, Shape::from(rows)))
    }

    fn bwd(
        &self,
        gt: &Tensor,
        gen: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (rows, n) = gt.dims2()?;
        let a = gt.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let b = gen.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let upstream = grad_res.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
        let mut g = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let row = pitch_loss_grad(&a[r * n..(r + 1) * n], &b[r * n..(r + 1) * n]).map_err(to_candle)?;
            g.extend(row.into_iter().map(|x| x * upstream[r]));
        }
        let grad_gen = Tensor::from_vec(g, (rows, n), gt.device())?.to_dtype(gen.dtype())?;
        let grad_gt = grad_gen.neg()?;
        Ok((Some(grad_gt), Some(grad_gen)))
    }
}

/// Outcome of comparing [`pitch_loss_grad`] with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub pairs: usize,
    /// Coordinates whose analytic gradient exceeded the magnitude floor.
    pub checked: usize,
    pub failures: usize,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Central finite differences (step `h`) against the analytic gradient on
/// `pairs` random contour pairs of length 4 to 64. Coordinates with
/// `|grad| <= 1e-6` are skipped; the rest must agree to relative `tol`.
pub fn gradcheck(seed: u64, pairs: usize, h: f64, tol: f64) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        pairs,
        checked: 0,
        failures: 0,
        max_rel_error: 0.0,
    };
    for p in 0..pairs {
        let mut rng = crate::nn::stream_rng(seed, &[p as u64, 0x9c]);
        let n = rng.random_range(4..=64);
        let mut draw = || -> Vec<f64> {
            (0..n)
                .map(|_| 1.5 + 0.5 * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect()
        };
        let gt = draw();
        let mut gen = draw();
        let grad = pitch_loss_grad(&gt, &gen)?;
        for i in 0..n {
            if grad[i].abs() <= 1e-6 {
                continue;
            }
            let x = gen[i];
            gen[i] = x + h;
            let up = pitch_loss(&gt, &gen)?;
            gen[i] = x - h;
            let down = pitch_loss(&gt, &gen)?;
            gen[i] = x;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs());
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if !(rel < tol) {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}
