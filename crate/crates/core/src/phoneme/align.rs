//! Hard monotonic alignment between phonemes and latent frames.
//!
//! The search runs on host copies of detached tensors; alignments enter the
//! graph only as constant one-hot expansion matrices.

use candle_core::{DType, Tensor};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Per-phoneme frame counts; sums to the aligned frame count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub durations: Vec<usize>,
}

impl Alignment {
    pub fn total_frames(&self) -> usize {
        self.durations.iter().sum()
    }

    /// Phoneme index of every frame.
    pub fn frame_to_phoneme(&self) -> Vec<usize> {
        self.durations.iter().enumerate().flat_map(|(i, &d)| std::iter::repeat_n(i, d)).collect()
    }
}

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian log-likelihood of every frame under every phoneme, `[N][T]`.
/// `mu`, `log_sigma` are `[d][N]`, `z` is `[d][T]`.
pub fn log_likelihood_matrix(mu: &[Vec<f64>], log_sigma: &[Vec<f64>], z: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = mu.len();
    let n = mu.first().map_or(0, Vec::len);
    let t = z.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; t]; n];
    for (i, row) in out.iter_mut().enumerate() {
        for c in 0..d {
            let m = mu[c][i];
            let ls = log_sigma[c][i];
            let inv_var = (-2.0 * ls).exp();
            let base = -0.5 * LOG_2PI - ls;
            for (j, cell) in row.iter_mut().enumerate() {
                let diff = z[c][j] - m;
                *cell += base - 0.5 * diff * diff * inv_var;
            }
        }
    }
    out
}

/// Maximum-likelihood monotonic alignment of `logp [N][T]`: every phoneme
/// gets at least one frame, phonemes advance in order, and the total
/// log-likelihood along the path is maximal.
pub fn monotonic_align(logp: &[Vec<f64>]) -> Result<Alignment> {
    let n = logp.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot align zero phonemes".into()));
    }
    let t = logp[0].len();
    if logp.iter().any(|r| r.len() != t) {
        return Err(Error::Shape("ragged likelihood matrix".into()));
    }
    if t < n {
        return Err(Error::TooShort(format!("{t} frames cannot align {n} phonemes")));
    }
    let neg = f64::NEG_INFINITY;
    // value[i][j]: best score of a path ending at phoneme i on frame j.
    let mut value = vec![vec![neg; t]; n];
    value[0][0] = logp[0][0];
    for j in 1..t {
        let lo = (n + j).saturating_sub(t);
        let hi = j.min(n - 1);
        for i in lo..=hi {
            let stay = value[i][j - 1];
            let advance = if i > 0 { value[i - 1][j - 1] } else { neg };
            value[i][j] = stay.max(advance) + logp[i][j];
        }
    }
    let mut durations = vec![0usize; n];
    let mut i = n - 1;
    for j in (0..t).rev() {
        durations[i] += 1;
        if j == 0 {
            break;
        }
        if i > 0 && (i == j || value[i - 1][j - 1] > value[i][j - 1]) {
            i -= 1;
        }
    }
    debug_assert_eq!(i, 0);
    Ok(Alignment { durations })
}

fn item_matrix(x: &Tensor, b: usize, rows: usize, cols: usize) -> Result<Vec<Vec<f64>>> {
    Ok(x.get(b)?.narrow(0, 0, rows)?.narrow(1, 0, cols)?.to_dtype(DType::F64)?.to_vec2()?)
}

/// Batched alignment of prior stats `[B, d, N]` against latents `[B, d, T]`
/// with per-item true lengths. Inputs are read without tracking gradients.
pub fn align_batch(
    prior_mu: &Tensor,
    prior_log_sigma: &Tensor,
    z: &Tensor,
    phoneme_lengths: &[usize],
    frame_lengths: &[usize],
) -> Result<Vec<Alignment>> {
    let d = z.dims()[1];
    let inputs = (0..phoneme_lengths.len())
        .map(|b| {
            let (n, t) = (phoneme_lengths[b], frame_lengths[b]);
            Ok((
                item_matrix(&prior_mu.detach(), b, d, n)?,
                item_matrix(&prior_log_sigma.detach(), b, d, n)?,
                item_matrix(&z.detach(), b, d, t)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    inputs
        .par_iter()
        .map(|(mu, ls, zz)| monotonic_align(&log_likelihood_matrix(mu, ls, zz)))
        .collect()
}

/// Repeats phoneme-level stats `[B, C, N]` along time according to each
/// item's durations, giving `[B, C, t_max]` (frames past an item's total are
/// zero).
pub fn expand_to_frames(stats: &Tensor, alignments: &[Alignment], t_max: usize) -> Result<Tensor> {
    let (b, _, n) = stats.dims3()?;
    if alignments.len() != b {
        return Err(Error::Shape(format!("{} alignments for batch of {b}", alignments.len())));
    }
    let mut onehot = vec![0f32; b * n * t_max];
    for (bi, a) in alignments.iter().enumerate() {
        if a.durations.len() > n {
            return Err(Error::Shape(format!("{} durations for {n} phonemes", a.durations.len())));
        }
        if a.total_frames() > t_max {
            return Err(Error::Shape(format!("durations sum to {} but only {t_max} frames requested", a.total_frames())));
        }
        for (frame, ph) in a.frame_to_phoneme().into_iter().enumerate() {
            onehot[(bi * n + ph) * t_max + frame] = 1.0;
        }
    }
    let onehot = Tensor::from_vec(onehot, (b, n, t_max), stats.device())?.to_dtype(stats.dtype())?;
    Ok(stats.matmul(&onehot)?)
}

/// Single-item expansion that insists the durations cover exactly `frames`.
pub fn expand_exact(stats: &Tensor, alignment: &Alignment, frames: usize) -> Result<Tensor> {
    if alignment.total_frames() != frames {
        return Err(Error::Shape(format!(
            "durations sum to {} but {frames} frames were requested",
            alignment.total_frames()
        )));
    }
    expand_to_frames(stats, std::slice::from_ref(alignment), frames)
}
