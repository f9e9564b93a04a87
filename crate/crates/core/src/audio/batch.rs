//! In-memory datasets and padded, masked training batches.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::manifest::{SpeakerIndex, UtteranceRecord};
use super::spectrogram::{LinearSpectrogram, Stft, StftConfig};
use super::Waveform;
use crate::error::{Error, Result};
use crate::phoneme::Vocabulary;
use crate::rng::{self, tag};

#[derive(Debug, Clone)]
pub struct Utterance {
    pub record: UtteranceRecord,
    pub waveform: Waveform,
    pub spec: LinearSpectrogram,
    pub phoneme_ids: Vec<u32>,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.spec.n_frames()
    }
}

/// Loaded corpus at the canonical rate with precomputed spectrograms.
#[derive(Debug, Clone)]
pub struct Dataset {
    index: SpeakerIndex,
    utterances: Vec<Utterance>,
    stft: StftConfig,
}

impl Dataset {
    /// Reads, resamples and analyses every record (in parallel).
    pub fn load(records: Vec<UtteranceRecord>, vocab: &Vocabulary, stft: StftConfig) -> Result<Self> {
        let waves = records
            .par_iter()
            .map(|r| Waveform::read_wav(&r.audio_path)?.resample(stft.sample_rate))
            .collect::<Result<Vec<_>>>()?;
        Self::from_waveforms(records, waves, vocab, stft)
    }

    pub fn from_waveforms(
        records: Vec<UtteranceRecord>,
        waves: Vec<Waveform>,
        vocab: &Vocabulary,
        stft: StftConfig,
    ) -> Result<Self> {
        if records.len() != waves.len() {
            return Err(Error::Shape(format!("{} records vs {} waveforms", records.len(), waves.len())));
        }
        if records.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let analyser = Stft::new(stft)?;
        let utterances = records
            .par_iter()
            .zip(waves.into_par_iter())
            .map(|(record, waveform)| {
                if record.phonemes.is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "utterance {} has no phonemes",
                        record.audio_path.display()
                    )));
                }
                if waveform.sample_rate() != stft.sample_rate {
                    return Err(Error::InvalidArgument(format!(
                        "{} is at {} Hz, expected {}",
                        record.audio_path.display(),
                        waveform.sample_rate(),
                        stft.sample_rate
                    )));
                }
                let phoneme_ids = vocab.encode(&record.phonemes)?;
                let spec = analyser.linear(&waveform)?;
                if spec.n_frames() < phoneme_ids.len() {
                    return Err(Error::TooShort(format!(
                        "{}: {} frames for {} phonemes",
                        record.audio_path.display(),
                        spec.n_frames(),
                        phoneme_ids.len()
                    )));
                }
                let mut record = record.clone();
                record.duration_s = waveform.duration_s();
                Ok(Utterance { record, waveform, spec, phoneme_ids })
            })
            .collect::<Result<Vec<_>>>()?;
        let index = SpeakerIndex::new(utterances.iter().map(|u| u.record.clone()).collect());
        Ok(Self { index, utterances, stft })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn speaker_index(&self) -> &SpeakerIndex {
        &self.index
    }

    pub fn stft(&self) -> &StftConfig {
        &self.stft
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        (self.len() / batch_size.max(1)).max(1)
    }

    /// Length-bucketed batch order for one epoch, a pure function of
    /// `(seed, epoch)`.
    pub fn epoch_plan(&self, seed: u64, epoch: u64, batch_size: usize) -> Vec<Vec<usize>> {
        let batch_size = batch_size.max(1).min(self.len());
        let mut r = rng::derive(seed, &[tag::EPOCH_PLAN, epoch]);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut r);
        let bucket = batch_size * 4;
        for chunk in order.chunks_mut(bucket) {
            chunk.sort_by_key(|&i| (self.utterances[i].n_frames(), i));
        }
        let mut batches: Vec<Vec<usize>> = order
            .chunks(batch_size)
            .filter(|c| c.len() == batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        batches.shuffle(&mut r);
        batches.truncate(self.steps_per_epoch(batch_size));
        batches
    }

    /// Ground-truth/reference pairs for global step `step`.
    pub fn batch_items(&self, seed: u64, step: u64, batch_size: usize) -> Result<Vec<(usize, usize)>> {
        let spe = self.steps_per_epoch(batch_size) as u64;
        let plan = self.epoch_plan(seed, step / spe, batch_size);
        let gts = &plan[(step % spe) as usize];
        gts.iter()
            .enumerate()
            .map(|(slot, &gt)| {
                let mut r = rng::derive(seed, &[tag::REFERENCE, step, slot as u64]);
                let speaker = &self.utterances[gt].record.speaker_id;
                Ok((gt, self.index.sample_reference(speaker, Some(gt), &mut r)?))
            })
            .collect()
    }
}

/// Extra padding requested beyond the batch maxima (used to check padding
/// invariance).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Padding {
    pub frames: usize,
    pub ref_frames: usize,
    pub phonemes: usize,
}

/// Padded, masked batch. Tensors are channel-first; masks are `[B, 1, T]`
/// with 1 on real positions and 0 on padding.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub spec_gt: Tensor,
    pub spec_ref: Tensor,
    pub phonemes: Tensor,
    pub frame_mask: Tensor,
    pub ref_mask: Tensor,
    pub phoneme_mask: Tensor,
    pub waveform_gt: Tensor,
    pub gt_lengths: Vec<usize>,
    pub ref_lengths: Vec<usize>,
    pub phoneme_lengths: Vec<usize>,
    pub gt_ids: Vec<usize>,
    pub ref_ids: Vec<usize>,
    pub speakers: Vec<String>,
}

pub fn sequence_mask(lengths: &[usize], max_len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = lengths
        .iter()
        .flat_map(|&l| (0..max_len).map(move |t| if t < l { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (lengths.len(), 1, max_len), device)?.to_dtype(dtype)?)
}

fn pad_specs(specs: &[&LinearSpectrogram], max_len: usize, device: &Device) -> Result<Tensor> {
    let n_bins = specs[0].n_bins();
    let mut data = vec![0f32; specs.len() * n_bins * max_len];
    for (b, s) in specs.iter().enumerate() {
        let t_len = s.n_frames();
        for t in 0..t_len {
            for (f, &v) in s.frame(t).iter().enumerate() {
                data[(b * n_bins + f) * max_len + t] = v;
            }
        }
    }
    Ok(Tensor::from_vec(data, (specs.len(), n_bins, max_len), device)?)
}

impl TrainingBatch {
    pub fn assemble(
        ds: &Dataset,
        items: &[(usize, usize)],
        padding: Padding,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let utts = ds.utterances();
        for &(g, r) in items {
            if utts[g].record.speaker_id != utts[r].record.speaker_id {
                return Err(Error::InvalidArgument(format!(
                    "reference {r} is not from the speaker of ground truth {g}"
                )));
            }
        }
        let gt: Vec<&Utterance> = items.iter().map(|&(g, _)| &utts[g]).collect();
        let rf: Vec<&Utterance> = items.iter().map(|&(_, r)| &utts[r]).collect();
        let gt_lengths: Vec<usize> = gt.iter().map(|u| u.n_frames()).collect();
        let ref_lengths: Vec<usize> = rf.iter().map(|u| u.n_frames()).collect();
        let phoneme_lengths: Vec<usize> = gt.iter().map(|u| u.phoneme_ids.len()).collect();
        let t_max = gt_lengths.iter().max().copied().unwrap_or(0) + padding.frames;
        let r_max = ref_lengths.iter().max().copied().unwrap_or(0) + padding.ref_frames;
        let n_max = phoneme_lengths.iter().max().copied().unwrap_or(0) + padding.phonemes;
        let hop = ds.stft().hop;

        let spec_gt = pad_specs(&gt.iter().map(|u| &u.spec).collect::<Vec<_>>(), t_max, device)?;
        let spec_ref = pad_specs(&rf.iter().map(|u| &u.spec).collect::<Vec<_>>(), r_max, device)?;

        let mut ids = vec![0u32; items.len() * n_max];
        for (b, u) in gt.iter().enumerate() {
            ids[b * n_max..b * n_max + u.phoneme_ids.len()].copy_from_slice(&u.phoneme_ids);
        }
        let phonemes = Tensor::from_vec(ids, (items.len(), n_max), device)?;

        let wave_len = t_max * hop;
        let mut wave = vec![0f32; items.len() * wave_len];
        for (b, u) in gt.iter().enumerate() {
            let s = u.waveform.samples();
            let n = s.len().min(wave_len);
            wave[b * wave_len..b * wave_len + n].copy_from_slice(&s[..n]);
        }
        let waveform_gt = Tensor::from_vec(wave, (items.len(), 1, wave_len), device)?;

        Ok(Self {
            spec_gt: spec_gt.to_dtype(dtype)?,
            spec_ref: spec_ref.to_dtype(dtype)?,
            phonemes,
            frame_mask: sequence_mask(&gt_lengths, t_max, dtype, device)?,
            ref_mask: sequence_mask(&ref_lengths, r_max, dtype, device)?,
            phoneme_mask: sequence_mask(&phoneme_lengths, n_max, dtype, device)?,
            waveform_gt: waveform_gt.to_dtype(dtype)?,
            gt_lengths,
            ref_lengths,
            phoneme_lengths,
            gt_ids: items.iter().map(|p| p.0).collect(),
            ref_ids: items.iter().map(|p| p.1).collect(),
            speakers: gt.iter().map(|u| u.record.speaker_id.clone()).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.gt_lengths.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    pub(crate) fn toy_dataset(lengths: &[(usize, &str)]) -> (Dataset, Vocabulary) {
        let vocab = Vocabulary::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let records = lengths
            .iter()
            .enumerate()
            .map(|(i, &(_, spk))| UtteranceRecord {
                audio_path: PathBuf::from(format!("u{i}.wav")),
                speaker_id: spk.to_string(),
                phonemes: vec!["a".into(), "b".into(), "c".into()][..1 + i % 3].to_vec(),
                duration_s: 0.0,
            })
            .collect();
        let waves = lengths
            .iter()
            .enumerate()
            .map(|(i, &(n, _))| {
                Waveform::new((0..n).map(|k| ((k + i) as f32 * 0.01).sin() * 0.3).collect(), 22050).unwrap()
            })
            .collect();
        (Dataset::from_waveforms(records, waves, &vocab, StftConfig::default()).unwrap(), vocab)
    }

    #[test]
    fn masks_flag_exactly_the_real_positions() {
        let (ds, _) = toy_dataset(&[(3000, "s1"), (7000, "s1"), (5000, "s2"), (900, "s2")]);
        let b = TrainingBatch::assemble(&ds, &[(0, 1), (2, 3), (3, 2)], Padding::default(), DType::F32, &Device::Cpu)
            .unwrap();
        let fm: Vec<Vec<f32>> = b.frame_mask.squeeze(1).unwrap().to_vec2().unwrap();
        for (row, &len) in fm.iter().zip(&b.gt_lengths) {
            assert!(row[..len].iter().all(|&v| v == 1.0));
            assert!(row[len..].iter().all(|&v| v == 0.0));
        }
        assert_eq!(b.spec_gt.dims()[2], fm[0].len());
        assert_eq!(b.waveform_gt.dims()[2], fm[0].len() * 256);
        let pm: Vec<Vec<f32>> = b.phoneme_mask.squeeze(1).unwrap().to_vec2().unwrap();
        assert_eq!(pm[0].iter().sum::<f32>() as usize, b.phoneme_lengths[0]);
        // padded spectrogram region is zero
        let spec: Vec<Vec<Vec<f32>>> = b.spec_gt.to_vec3().unwrap();
        let len = b.gt_lengths[2];
        assert!(spec[2].iter().all(|bin| bin[len..].iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn mismatched_reference_speaker_is_rejected() {
        let (ds, _) = toy_dataset(&[(3000, "s1"), (3000, "s2")]);
        assert!(TrainingBatch::assemble(&ds, &[(0, 1)], Padding::default(), DType::F32, &Device::Cpu).is_err());
    }

    #[test]
    fn batch_items_pair_same_speakers_and_are_reproducible() {
        let spk = ["s1", "s2", "s3"];
        let lens: Vec<(usize, &str)> = (0..12).map(|i| (2000 + 300 * i, spk[i % 3])).collect();
        let (ds, _) = toy_dataset(&lens);
        for step in 0..20 {
            let items = ds.batch_items(5, step, 4).unwrap();
            assert_eq!(items, ds.batch_items(5, step, 4).unwrap());
            assert_eq!(items.len(), 4);
            for (g, r) in items {
                assert_ne!(g, r);
                assert_eq!(ds.utterances()[g].record.speaker_id, ds.utterances()[r].record.speaker_id);
            }
        }
        // every utterance appears once per epoch
        let mut seen: Vec<usize> = ds.epoch_plan(5, 3, 4).concat();
        seen.sort();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }

    proptest::proptest! {
        #[test]
        fn padding_positions_are_always_masked(
            lens in proptest::collection::vec(800usize..6000, 1..6),
            extra in 0usize..7,
        ) {
            let spk: Vec<(usize, &str)> = lens.iter().map(|&n| (n, "s")).collect();
            let (ds, _) = toy_dataset(&spk);
            let items: Vec<(usize, usize)> = (0..ds.len()).map(|i| (i, (i + 1) % ds.len())).collect();
            let pad = Padding { frames: extra, ref_frames: extra, phonemes: extra };
            let b = TrainingBatch::assemble(&ds, &items, pad, DType::F32, &Device::Cpu).unwrap();
            for (mask, lengths) in [(&b.frame_mask, &b.gt_lengths), (&b.ref_mask, &b.ref_lengths), (&b.phoneme_mask, &b.phoneme_lengths)] {
                let m: Vec<Vec<f32>> = mask.squeeze(1).unwrap().to_vec2().unwrap();
                for (row, &len) in m.iter().zip(lengths.iter()) {
                    proptest::prop_assert_eq!(row.len(), lengths.iter().max().unwrap() + extra);
                    let expected: Vec<f32> = (0..row.len()).map(|t| if t < len { 1.0 } else { 0.0 }).collect();
                    proptest::prop_assert_eq!(row, &expected);
                }
            }
        }
    }
}
