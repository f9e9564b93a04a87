//! One joint training step over all modules, and the loop around it.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::batch::{Dataset, Padding, TrainingBatch};
use crate::config::{SpeakerInput, TrainConfig};
use crate::disentangle::{
    leakage_discriminator_loss, speaker_encoder_adversarial_loss, timbre_residual_loss, GradientReversal,
};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::phoneme::{align_batch, duration_loss, expand_to_frames};
use crate::rng::{self, tag};
use crate::speaker::{make_contrastive_pairs, PairDraw};
use crate::train::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::vae::{check_mask, reconstruction_loss, sample_latent};

/// Scalar values of every loss term for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub learning_rate: f64,
    pub recon: f64,
    pub kl_prior: f64,
    pub duration: f64,
    pub loss_p: f64,
    pub loss_se: f64,
    pub loss_d: f64,
    pub gen_total: f64,
    pub disc_total: f64,
    pub grad_norm_gen: f64,
    pub grad_norm_disc: f64,
}

impl LossReport {
    /// The named loss terms, in a fixed order.
    pub fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("recon", self.recon),
            ("kl_prior", self.kl_prior),
            ("duration", self.duration),
            ("loss_p", self.loss_p),
            ("loss_se", self.loss_se),
            ("loss_d", self.loss_d),
            ("gen_total", self.gen_total),
            ("disc_total", self.disc_total),
        ]
    }
}

/// Graph-attached loss terms of one forward pass.
pub struct StepLosses {
    pub recon: Tensor,
    pub kl_prior: Tensor,
    pub duration: Tensor,
    pub loss_p: Tensor,
    pub loss_se: Tensor,
    pub loss_d: Tensor,
    pub gen_total: Tensor,
    pub disc_total: Tensor,
}

impl StepLosses {
    fn named(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("recon", &self.recon),
            ("kl_prior", &self.kl_prior),
            ("duration", &self.duration),
            ("loss_p", &self.loss_p),
            ("loss_se", &self.loss_se),
            ("loss_d", &self.loss_d),
            ("gen_total", &self.gen_total),
            ("disc_total", &self.disc_total),
        ]
    }

    /// Scalar values, failing on the first non-finite term.
    pub fn values(&self, step: u64) -> Result<[f64; 8]> {
        let mut out = [0.0; 8];
        for (i, (name, t)) in self.named().iter().enumerate() {
            let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !v.is_finite() {
                return Err(Error::NonFinite { term: name, step });
            }
            out[i] = v;
        }
        Ok(out)
    }
}

/// Masked KL between the posterior and the flow-pulled-back phoneme prior,
/// per valid frame. `z_p` is the reverse-flow image of the posterior sample
/// and `logdet_reverse` `[B]` the log-determinant of that reverse map.
pub fn prior_matching_loss(
    z_p: &Tensor,
    posterior_log_sigma: &Tensor,
    prior_mu: &Tensor,
    prior_log_sigma: &Tensor,
    logdet_reverse: &Tensor,
    mask: &Tensor,
) -> Result<Tensor> {
    for (what, t) in [("posterior log-sigma", posterior_log_sigma), ("prior mean", prior_mu), ("prior log-sigma", prior_log_sigma)] {
        if t.dims() != z_p.dims() {
            return Err(Error::Shape(format!("{what} is {:?}, latent is {:?}", t.dims(), z_p.dims())));
        }
    }
    check_mask(z_p, mask, "latent")?;
    if logdet_reverse.dims() != [z_p.dims()[0]] {
        return Err(Error::Shape(format!("log-determinant is {:?}", logdet_reverse.dims())));
    }
    let diff = (z_p - prior_mu)?;
    let kl = ((prior_log_sigma - posterior_log_sigma)? - 0.5)?
        .add(&(diff.sqr()? * (prior_log_sigma * -2.0)?.exp()?)?.affine(0.5, 0.0)?)?;
    let total = (kl.broadcast_mul(mask)?.sum_all()? - logdet_reverse.sum_all()?)?;
    Ok((total / mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)?)
}

/// Standard-normal noise `[B, channels, t_max]`, drawn per item over its true
/// length from a stream keyed by `(tag, step, slot, salt)`.
pub fn batch_noise(
    seed: u64,
    path: [u64; 2],
    salt: u64,
    lengths: &[usize],
    channels: usize,
    t_max: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut data = vec![0f64; lengths.len() * channels * t_max];
    for (slot, &len) in lengths.iter().enumerate() {
        let mut r = rng::derive(seed, &[path[0], path[1], slot as u64, salt]);
        for c in 0..channels {
            for t in 0..len {
                data[(slot * channels + c) * t_max + t] = r.sample(rand_distr::StandardNormal);
            }
        }
    }
    Ok(Tensor::from_vec(data, (lengths.len(), channels, t_max), device)?.to_dtype(dtype)?)
}

fn segment_starts(seed: u64, step: u64, lengths: &[usize], seg: usize) -> Vec<usize> {
    lengths
        .iter()
        .enumerate()
        .map(|(slot, &len)| rng::derive(seed, &[tag::SEGMENT, step, slot as u64]).random_range(0..=len - seg))
        .collect()
}

/// Full forward pass for `batch` at `step`, producing every loss term.
pub fn compute_losses(model: &Model, cfg: &TrainConfig, batch: &TrainingBatch, step: u64) -> Result<StepLosses> {
    let (dtype, dev) = (model.dtype(), model.device().clone());
    let d = model.cfg.d_latent;
    let seed = cfg.seed;
    let t_max = batch.frame_mask.dims()[2];
    let r_max = batch.ref_mask.dims()[2];

    let post_gt = model.posterior.encode(&batch.spec_gt, &batch.frame_mask)?;
    let eps_gt = batch_noise(seed, [tag::LATENT_NOISE, step], 0, &batch.gt_lengths, d, t_max, dtype, &dev)?;
    let z_gt = sample_latent(&post_gt, &eps_gt)?;
    let post_ref = model.posterior.encode(&batch.spec_ref, &batch.ref_mask)?;
    let eps_ref = batch_noise(seed, [tag::LATENT_NOISE, step], 1, &batch.ref_lengths, d, r_max, dtype, &dev)?;
    let z_ref = sample_latent(&post_ref, &eps_ref)?;

    let draws: Vec<PairDraw> = (0..batch.size())
        .map(|slot| PairDraw::sample(&mut rng::derive(seed, &[tag::SPLIT, step, slot as u64]), cfg.rho_min, cfg.rho_max))
        .collect();
    let (gt_in, ref_in) = match model.speaker.input_kind() {
        SpeakerInput::Latent => (&z_gt.values, &z_ref.values),
        SpeakerInput::Spectrogram => (&batch.spec_gt, &batch.spec_ref),
    };
    let pairs = make_contrastive_pairs(&model.speaker, gt_in, &batch.gt_lengths, ref_in, &batch.ref_lengths, &draws)?;
    let s = &pairs.downstream;

    let (z_p, logdet_rev) = model.flow.reverse_with_logdet(&z_gt.values, &batch.frame_mask, s)?;
    let text = model.text.forward(&batch.phonemes, &batch.phoneme_mask)?;
    let alignments = align_batch(&text.mu, &text.log_sigma, &z_p, &batch.phoneme_lengths, &batch.gt_lengths)?;
    let m_p = expand_to_frames(&text.mu, &alignments, t_max)?;
    let logs_p = expand_to_frames(&text.log_sigma, &alignments, t_max)?;
    let kl_prior = prior_matching_loss(&z_p, &post_gt.log_sigma, &m_p, &logs_p, &logdet_rev, &batch.frame_mask)?;

    let log_dur = model.duration.forward(&text.hidden.detach(), &batch.phoneme_mask, &s.detach())?;
    let targets: Vec<Vec<usize>> = alignments.iter().map(|a| a.durations.clone()).collect();
    let duration = duration_loss(&log_dur, &targets, &batch.phoneme_mask)?;

    let hop = model.decoder.hop();
    let seg = cfg.segment_frames.min(*batch.gt_lengths.iter().min().expect("non-empty batch"));
    let starts = segment_starts(seed, step, &batch.gt_lengths, seg);
    let mut z_seg = Vec::with_capacity(starts.len());
    let mut y_seg = Vec::with_capacity(starts.len());
    for (b, &st) in starts.iter().enumerate() {
        z_seg.push(z_gt.values.narrow(0, b, 1)?.narrow(2, st, seg)?);
        y_seg.push(batch.waveform_gt.narrow(0, b, 1)?.narrow(2, st * hop, seg * hop)?);
    }
    let y_hat = model.decoder.forward(&Tensor::cat(&z_seg, 0)?)?;
    let recon = reconstruction_loss(&model.mel, &y_hat, &Tensor::cat(&y_seg, 0)?)?;

    let d_contrast = model.leakage.forward(&pairs.pair_contrast.detach())?;
    let d_overlap = model.leakage.forward(&pairs.pair_overlap.detach())?;
    let loss_p = leakage_discriminator_loss(&d_contrast, &d_overlap)?;
    let d_overlap_frozen = model.leakage.frozen().forward(&pairs.pair_overlap)?;
    let loss_se = speaker_encoder_adversarial_loss(&d_overlap_frozen, cfg.lambda_se)?;

    let eps_prior = batch_noise(seed, [tag::PRIOR_NOISE, step], 0, &batch.gt_lengths, d, t_max, dtype, &dev)?;
    let m_sample = (m_p + logs_p.exp()?.mul(&eps_prior)?)?.broadcast_mul(&batch.frame_mask)?.detach();
    let d_m = model.timbre.forward(&m_sample, &batch.frame_mask)?;
    let (z_p_flow, _) = model.flow.reverse_with_logdet(&z_gt.values.detach(), &batch.frame_mask, &s.detach())?;
    let reversed = GradientReversal::new(cfg.lambda_d)?.apply(&z_p_flow)?;
    let d_rev = model.timbre.forward(&reversed, &batch.frame_mask)?;
    let loss_d = timbre_residual_loss(&d_m, &d_rev)?;

    let gen_total = ((((&recon * cfg.recon_weight)? + (&kl_prior * cfg.kl_weight)?)? + (&duration * cfg.duration_weight)?)?
        + &loss_se)?;
    let disc_total = (&loss_p + &loss_d)?;
    Ok(StepLosses { recon, kl_prior, duration, loss_p, loss_se, loss_d, gen_total, disc_total })
}

/// Model plus both optimizers and the global step counter.
pub struct Trainer {
    pub model: Model,
    cfg: TrainConfig,
    gen_opt: AdamW,
    disc_opt: AdamW,
    step: u64,
    steps_per_epoch: u64,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, steps_per_epoch: usize) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamWConfig { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps, weight_decay: cfg.weight_decay };
        let gen_opt = AdamW::new(model.generator_params(), opt)?;
        let disc_opt = AdamW::new(model.discriminator_params(), opt)?;
        Ok(Self { model, cfg, gen_opt, disc_opt, step: 0, steps_per_epoch: steps_per_epoch.max(1) as u64 })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Steps completed so far; the next step has this index.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.steps_per_epoch
    }

    pub fn learning_rate(&self) -> f64 {
        self.cfg.lr_at_epoch(self.epoch())
    }

    pub fn optimizers(&self) -> (&AdamW, &AdamW) {
        (&self.gen_opt, &self.disc_opt)
    }

    pub(crate) fn restore(&mut self, step: u64, gen: (Vec<(String, Tensor, Tensor)>, u64), disc: (Vec<(String, Tensor, Tensor)>, u64)) -> Result<()> {
        self.gen_opt.restore(gen.0, gen.1)?;
        self.disc_opt.restore(disc.0, disc.1)?;
        self.step = step;
        Ok(())
    }

    /// The batch scheduled for the next step.
    pub fn next_batch(&self, ds: &Dataset) -> Result<TrainingBatch> {
        let items = ds.batch_items(self.cfg.seed, self.step, self.cfg.batch_size)?;
        TrainingBatch::assemble(ds, &items, Padding::default(), self.model.dtype(), self.model.device())
    }

    /// Loss values for `batch` at the current step without updating anything.
    pub fn evaluate(&self, batch: &TrainingBatch) -> Result<LossReport> {
        let losses = compute_losses(&self.model, &self.cfg, batch, self.step)?;
        self.report(&losses, 0.0, 0.0)
    }

    fn report(&self, losses: &StepLosses, grad_norm_gen: f64, grad_norm_disc: f64) -> Result<LossReport> {
        let [recon, kl_prior, duration, loss_p, loss_se, loss_d, gen_total, disc_total] = losses.values(self.step)?;
        Ok(LossReport {
            step: self.step + 1,
            learning_rate: self.learning_rate(),
            recon,
            kl_prior,
            duration,
            loss_p,
            loss_se,
            loss_d,
            gen_total,
            disc_total,
            grad_norm_gen,
            grad_norm_disc,
        })
    }

    /// Forward, single backward pass over both objectives, clipping, then a
    /// generator update followed by a discriminator update.
    pub fn train_step(&mut self, batch: &TrainingBatch) -> Result<LossReport> {
        let losses = compute_losses(&self.model, &self.cfg, batch, self.step)?;
        losses.values(self.step)?;
        let grads = (&losses.gen_total + &losses.disc_total)?.backward()?;
        let mut gen_grads = self.gen_opt.gradients(&grads)?;
        let mut disc_grads = self.disc_opt.gradients(&grads)?;
        let gen_norm = clip_global_norm(&mut gen_grads, self.cfg.grad_clip)?;
        let disc_norm = clip_global_norm(&mut disc_grads, self.cfg.grad_clip)?;
        for (term, norm) in [("generator gradient", gen_norm), ("discriminator gradient", disc_norm)] {
            if !norm.is_finite() {
                return Err(Error::NonFinite { term, step: self.step });
            }
        }
        let report = self.report(&losses, gen_norm, disc_norm)?;
        let lr = self.learning_rate();
        self.gen_opt.step(&gen_grads, lr)?;
        self.disc_opt.step(&disc_grads, lr)?;
        self.step += 1;
        Ok(report)
    }

    /// Runs `steps` scheduled steps on `ds`, handing each report to `on_step`.
    pub fn run(
        &mut self,
        ds: &Dataset,
        steps: u64,
        mut on_step: impl FnMut(&Self, &LossReport) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..steps {
            let batch = self.next_batch(ds)?;
            let report = self.train_step(&batch)?;
            log::debug!("step {} recon {:.4} kl {:.4}", report.step, report.recon, report.kl_prior);
            on_step(self, &report)?;
        }
        Ok(())
    }
}
