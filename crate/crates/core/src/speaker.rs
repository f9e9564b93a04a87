//! Speaker encoder over latent speech sequences, the overlapping
//! sub-sequence split, and the contrastive embedding pairs fed to the
//! phoneme-leakage discriminator.

use candle_core::Tensor;
use rand::Rng;

use crate::config::{ModelConfig, SpeakerInput};
use crate::error::{Error, Result};
use crate::nn::{AttentiveStatsPool, Conv1d, ConvSpec, Linear, ParamPath, Res2Block};
use crate::vae::{check_mask, LatentSpeechSequence};

/// Shortest sequence that still leaves both halves non-empty after rounding.
pub const MIN_SPLIT_FRAMES: usize = 5;

/// Two overlapping spans anchored at the sequence ends: `[0, L)` and
/// `[T - L, T)`, sharing `overlap_frames = 2L - T` frames in the middle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverlapSplit {
    pub span1: (usize, usize),
    pub span2: (usize, usize),
    pub overlap_frames: usize,
}

/// Splits `t` frames with an overlap of about `rho * t` frames. The overlap
/// is rounded, then nudged by one frame toward `rho * t` when needed so that
/// `t + overlap` is even.
pub fn split_overlapping(t: usize, rho: f64) -> Result<OverlapSplit> {
    if t < MIN_SPLIT_FRAMES {
        return Err(Error::TooShort(format!("{t} frames; need at least {MIN_SPLIT_FRAMES} to split")));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidArgument(format!("overlap fraction must be in (0, 1], got {rho}")));
    }
    let target = rho * t as f64;
    let mut overlap = target.round() as usize;
    if (t + overlap) % 2 == 1 {
        overlap = if (overlap as f64) < target || overlap == 0 { overlap + 1 } else { overlap - 1 };
        if overlap > t {
            overlap -= 2;
        }
    }
    let len = (t + overlap) / 2;
    Ok(OverlapSplit { span1: (0, len), span2: (t - len, t), overlap_frames: overlap })
}

/// Fixed-size speaker vector for one sequence.
#[derive(Debug, Clone)]
pub struct SpeakerEmbedding {
    pub vector: Tensor,
    pub source_span: (usize, usize),
}

impl SpeakerEmbedding {
    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.vector.to_dtype(candle_core::DType::F64)?.to_vec1()?)
    }
}

/// Convolutional front end with squeeze-excitation Res2 blocks, multi-layer
/// feature aggregation, attentive statistics pooling and a two-layer
/// feedforward head.
#[derive(Debug, Clone)]
pub struct SpeakerEncoder {
    pre: Conv1d,
    blocks: Vec<Res2Block>,
    aggregate: Conv1d,
    pool: AttentiveStatsPool,
    head1: Linear,
    head2: Linear,
    input: SpeakerInput,
    in_channels: usize,
    d_spk: usize,
}

impl SpeakerEncoder {
    pub fn new(p: &mut ParamPath<'_>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.speaker_channels;
        let in_channels = cfg.speaker_input_channels();
        let blocks = (0..cfg.speaker_blocks)
            .map(|i| Res2Block::new(&mut p.sub(format!("block.{i}")), c, cfg.speaker_scale, 3, i + 2, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pre: Conv1d::new(&mut p.sub("pre"), in_channels, c, ConvSpec::same(5, 1))?,
            blocks,
            aggregate: Conv1d::new(&mut p.sub("aggregate"), c * cfg.speaker_blocks.max(1), c, ConvSpec::pointwise())?,
            pool: AttentiveStatsPool::new(&mut p.sub("pool"), c, cfg.speaker_attention)?,
            head1: Linear::new(&mut p.sub("head1"), 2 * c, 2 * cfg.d_spk)?,
            head2: Linear::new(&mut p.sub("head2"), 2 * cfg.d_spk, cfg.d_spk)?,
            input: cfg.speaker_input,
            in_channels,
            d_spk: cfg.d_spk,
        })
    }

    pub fn d_spk(&self) -> usize {
        self.d_spk
    }

    pub fn input_kind(&self) -> SpeakerInput {
        self.input
    }

    /// `x [B, C_in, T]`, `mask [B, 1, T]` -> `[B, d_spk]`.
    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        check_mask(x, mask, "speaker input")?;
        if x.dims()[1] != self.in_channels {
            return Err(Error::Shape(format!("speaker encoder expects {} channels, got {}", self.in_channels, x.dims()[1])));
        }
        let mut h = self.pre.forward(&x.broadcast_mul(mask)?)?.relu()?.broadcast_mul(mask)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            h = block.forward(&h, mask)?;
            outs.push(h.clone());
        }
        let h = if outs.is_empty() { h } else { Tensor::cat(&outs, 1)? };
        let h = self.aggregate.forward(&h)?.relu()?.broadcast_mul(mask)?;
        let pooled = self.pool.forward(&h, mask)?;
        self.head2.forward(&self.head1.forward(&pooled)?.relu()?)
    }

    /// Embeds per-item spans of a batched sequence (`spans[b] = (start, end)`),
    /// re-padding the cut spans to their common maximum.
    pub fn embed_spans(&self, x: &Tensor, spans: &[(usize, usize)]) -> Result<Tensor> {
        let (b, _, t) = x.dims3()?;
        if spans.len() != b {
            return Err(Error::Shape(format!("{} spans for batch of {b}", spans.len())));
        }
        if let Some(&(s, e)) = spans.iter().find(|&&(s, e)| e <= s || e > t) {
            return Err(Error::InvalidArgument(format!("span [{s}, {e}) is empty or outside {t} frames")));
        }
        let max_len = spans.iter().map(|(s, e)| e - s).max().unwrap_or(0);
        let lengths: Vec<usize> = spans.iter().map(|(s, e)| e - s).collect();
        let cut = spans
            .iter()
            .enumerate()
            .map(|(i, &(s, e))| Ok(x.narrow(0, i, 1)?.narrow(2, s, e - s)?.pad_with_zeros(2, 0, max_len - (e - s))?))
            .collect::<Result<Vec<_>>>()?;
        let cut = Tensor::cat(&cut, 0)?;
        let mask = crate::audio::batch::sequence_mask(&lengths, max_len, x.dtype(), x.device())?;
        self.forward(&cut, &mask)
    }

    fn require(&self, kind: SpeakerInput) -> Result<()> {
        if self.input != kind {
            return Err(Error::Config(format!("speaker encoder is configured for {} input, not {kind}", self.input)));
        }
        Ok(())
    }

    /// Embedding of frames `span` of a single latent sequence (batch 1).
    pub fn extract_embedding(&self, z: &LatentSpeechSequence, span: (usize, usize)) -> Result<SpeakerEmbedding> {
        self.require(SpeakerInput::Latent)?;
        if z.values.dims()[0] != 1 {
            return Err(Error::Shape("extract_embedding takes a single sequence".into()));
        }
        let v = self.embed_spans(&z.values, &[span])?;
        Ok(SpeakerEmbedding { vector: v.squeeze(0)?, source_span: span })
    }

    /// Ablation path: embedding straight from a linear spectrogram `[1, F, T]`.
    pub fn extract_from_spectrogram(&self, spec: &Tensor, span: (usize, usize)) -> Result<SpeakerEmbedding> {
        self.require(SpeakerInput::Spectrogram)?;
        let v = self.embed_spans(spec, &[span])?;
        Ok(SpeakerEmbedding { vector: v.squeeze(0)?, source_span: span })
    }
}

/// Per-item random choices for one contrastive-pair construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairDraw {
    pub rho: f64,
    /// Use the first sub-sequence embedding downstream (else the second).
    pub downstream_first: bool,
}

impl PairDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, rho_min: f64, rho_max: f64) -> Self {
        let rho = if rho_max > rho_min { rng.random_range(rho_min..=rho_max) } else { rho_min };
        Self { rho, downstream_first: rng.random_bool(0.5) }
    }
}

/// Embeddings for the leakage discriminator and the downstream conditioning
/// vector, all `[B, ·]`.
#[derive(Debug, Clone)]
pub struct ContrastivePairs {
    pub s_ref1: Tensor,
    pub s_ref2: Tensor,
    pub s_gt: Tensor,
    /// `s_ref1 ⊕ s_ref2` (overlapping sources).
    pub pair_overlap: Tensor,
    /// `s_gt ⊕ s_ref2` (disjoint sources).
    pub pair_contrast: Tensor,
    pub downstream: Tensor,
    pub splits: Vec<OverlapSplit>,
}

/// Builds both pairs from batched sequences. `gt` and `reference` are the
/// speaker-encoder inputs (latents, or spectrograms under the ablation) with
/// per-item true lengths.
pub fn make_contrastive_pairs(
    encoder: &SpeakerEncoder,
    gt: &Tensor,
    gt_lengths: &[usize],
    reference: &Tensor,
    ref_lengths: &[usize],
    draws: &[PairDraw],
) -> Result<ContrastivePairs> {
    if draws.len() != ref_lengths.len() || gt_lengths.len() != ref_lengths.len() {
        return Err(Error::Shape("draws, gt lengths and reference lengths must match the batch".into()));
    }
    let splits = ref_lengths
        .iter()
        .zip(draws)
        .map(|(&t, d)| split_overlapping(t, d.rho))
        .collect::<Result<Vec<_>>>()?;
    let s_ref1 = encoder.embed_spans(reference, &splits.iter().map(|s| s.span1).collect::<Vec<_>>())?;
    let s_ref2 = encoder.embed_spans(reference, &splits.iter().map(|s| s.span2).collect::<Vec<_>>())?;
    let s_gt = encoder.embed_spans(gt, &gt_lengths.iter().map(|&t| (0, t)).collect::<Vec<_>>())?;
    let pair_overlap = Tensor::cat(&[&s_ref1, &s_ref2], 1)?;
    let pair_contrast = Tensor::cat(&[&s_gt, &s_ref2], 1)?;
    let pick: Vec<f32> = draws.iter().map(|d| if d.downstream_first { 1.0 } else { 0.0 }).collect();
    let pick = Tensor::from_vec(pick, (draws.len(), 1), s_ref1.device())?.to_dtype(s_ref1.dtype())?;
    let downstream = (s_ref1.broadcast_mul(&pick)? + s_ref2.broadcast_mul(&(pick.ones_like()? - &pick)?)?)?;
    Ok(ContrastivePairs { s_ref1, s_ref2, s_gt, pair_overlap, pair_contrast, downstream, splits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng;
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    #[test]
    fn split_examples() {
        assert_eq!(
            split_overlapping(100, 0.30).unwrap(),
            OverlapSplit { span1: (0, 65), span2: (35, 100), overlap_frames: 30 }
        );
        assert_eq!(
            split_overlapping(10, 0.20).unwrap(),
            OverlapSplit { span1: (0, 6), span2: (4, 10), overlap_frames: 2 }
        );
        assert_eq!(
            split_overlapping(11, 0.27).unwrap(),
            OverlapSplit { span1: (0, 7), span2: (4, 11), overlap_frames: 3 }
        );
        assert!(matches!(split_overlapping(4, 0.3), Err(Error::TooShort(_))));
        assert!(split_overlapping(50, 0.0).is_err());
    }

    #[test]
    fn full_overlap_covers_everything() {
        let s = split_overlapping(37, 1.0).unwrap();
        assert_eq!((s.span1, s.span2, s.overlap_frames), ((0, 37), (0, 37), 37));
    }

    proptest! {
        #[test]
        fn split_invariants(t in 5usize..=2000, rho in 0.2f64..=0.4) {
            let s = split_overlapping(t, rho).unwrap();
            let len = s.span1.1;
            prop_assert_eq!(2 * len - t, s.overlap_frames);
            prop_assert!(len <= t);
            prop_assert_eq!(s.span2, (t - len, t));
            let frac = s.overlap_frames as f64 / t as f64;
            let slack = 1.5 / t as f64;
            prop_assert!(frac >= 0.2 - slack && frac <= 0.4 + slack, "t {} rho {} frac {}", t, rho, frac);
        }
    }

    fn encoder(seed: u64) -> (ParamStore, SpeakerEncoder) {
        let cfg = ModelConfig::toy(8);
        let mut store = ParamStore::new(seed, DType::F64, &Device::Cpu);
        let enc = SpeakerEncoder::new(&mut store.root().sub("spk"), &cfg).unwrap();
        (store, enc)
    }

    fn latent(t: usize, seed: u64) -> LatentSpeechSequence {
        let mut r = rng::derive(seed, &[]);
        let values = crate::nn::host_normal(&mut r, &[1, 16, t], DType::F64, &Device::Cpu).unwrap();
        LatentSpeechSequence { values, mask: Tensor::ones((1, 1, t), DType::F64, &Device::Cpu).unwrap() }
    }

    #[test]
    fn embedding_is_deterministic_and_fixed_size() {
        let (_s, enc) = encoder(1);
        let z = latent(60, 2);
        let a = enc.extract_embedding(&z, (3, 40)).unwrap().to_vec().unwrap();
        let b = enc.extract_embedding(&z, (3, 40)).unwrap().to_vec().unwrap();
        assert_eq!(a, b);
        for len in [1usize, 5, 50] {
            let e = enc.extract_embedding(&z, (0, len)).unwrap();
            assert_eq!(e.vector.dims(), &[32]);
            assert!(e.to_vec().unwrap().iter().all(|v| v.is_finite()));
        }
        assert!(enc.extract_embedding(&z, (5, 5)).is_err());
        assert!(enc.extract_embedding(&z, (0, 61)).is_err());
    }

    #[test]
    fn constant_sequence_embeds_finitely() {
        let (_s, enc) = encoder(3);
        let col = Tensor::arange(0f64, 16.0, &Device::Cpu).unwrap().reshape((1, 16, 1)).unwrap();
        let values = col.broadcast_as((1, 16, 30)).unwrap().contiguous().unwrap();
        let z = LatentSpeechSequence { values, mask: Tensor::ones((1, 1, 30), DType::F64, &Device::Cpu).unwrap() };
        let e = enc.extract_embedding(&z, (0, 30)).unwrap().to_vec().unwrap();
        assert!(e.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ablation_flag_gates_the_input_type() {
        let (_s, enc) = encoder(1);
        let spec = Tensor::zeros((1, 513, 10), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(enc.extract_from_spectrogram(&spec, (0, 10)), Err(Error::Config(_))));
        let mut cfg = ModelConfig::toy(8);
        cfg.speaker_input = SpeakerInput::Spectrogram;
        let mut store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let enc = SpeakerEncoder::new(&mut store.root().sub("spk"), &cfg).unwrap();
        assert_eq!(enc.extract_from_spectrogram(&spec, (0, 10)).unwrap().vector.dims(), &[32]);
        assert!(enc.extract_embedding(&latent(10, 0), (0, 10)).is_err());
    }

    #[test]
    fn pairs_have_double_width_and_degenerate_identity() {
        let (_s, enc) = encoder(4);
        let z = latent(40, 9);
        let draws = [PairDraw { rho: 1.0, downstream_first: true }];
        let p = make_contrastive_pairs(&enc, &z.values, &[40], &z.values, &[40], &draws).unwrap();
        assert_eq!(p.pair_overlap.dims(), &[1, 64]);
        assert_eq!(p.pair_contrast.dims(), &[1, 64]);
        let a: Vec<f64> = p.pair_overlap.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = p.pair_contrast.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn downstream_choice_follows_draw() {
        let (_s, enc) = encoder(5);
        let z = latent(50, 1);
        let zz = Tensor::cat(&[&z.values, &z.values], 0).unwrap();
        let draws = [PairDraw { rho: 0.3, downstream_first: true }, PairDraw { rho: 0.3, downstream_first: false }];
        let p = make_contrastive_pairs(&enc, &zz, &[50, 50], &zz, &[50, 50], &draws).unwrap();
        let d: Vec<Vec<f64>> = p.downstream.to_vec2().unwrap();
        let s1: Vec<Vec<f64>> = p.s_ref1.to_vec2().unwrap();
        let s2: Vec<Vec<f64>> = p.s_ref2.to_vec2().unwrap();
        assert_eq!(d[0], s1[0]);
        assert_eq!(d[1], s2[1]);
        assert_ne!(s1[0], s2[0]);
    }

    #[test]
    fn downstream_draw_is_fair() {
        let mut r = rng::derive(77, &[]);
        let n = 10_000;
        let firsts = (0..n).filter(|_| PairDraw::sample(&mut r, 0.2, 0.4).downstream_first).count();
        let f = firsts as f64 / n as f64;
        assert!((f - 0.5).abs() <= 0.02, "{f}");
        let d = PairDraw::sample(&mut r, 0.2, 0.4);
        assert!((0.2..=0.4).contains(&d.rho));
    }
}
