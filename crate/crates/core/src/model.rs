//! All trainable modules behind one parameter store.

use candle_core::{DType, Device, Var};

use crate::config::ModelConfig;
use crate::disentangle::{LeakageDiscriminator, TimbreResidualDiscriminator};
use crate::error::Result;
use crate::flow::CouplingStack;
use crate::nn::ParamStore;
use crate::phoneme::{DurationPredictor, TextEncoder};
use crate::speaker::SpeakerEncoder;
use crate::vae::{Decoder, MelTransform, PosteriorEncoder};

/// Parameter-name prefix of everything the generator-side optimizer owns.
pub const GENERATOR: &str = "gen";
/// Parameter-name prefix of the two discriminators.
pub const DISCRIMINATOR: &str = "disc";

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub posterior: PosteriorEncoder,
    pub decoder: Decoder,
    pub text: TextEncoder,
    pub duration: DurationPredictor,
    pub speaker: SpeakerEncoder,
    pub flow: CouplingStack,
    pub leakage: LeakageDiscriminator,
    pub timbre: TimbreResidualDiscriminator,
    pub mel: MelTransform,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, dtype, device);
        let mut root = store.root();
        let mut gen = root.sub(GENERATOR);
        let posterior = PosteriorEncoder::new(&mut gen.sub("posterior"), &cfg)?;
        let decoder = Decoder::new(&mut gen.sub("decoder"), &cfg)?;
        let text = TextEncoder::new(&mut gen.sub("text"), &cfg)?;
        let duration = DurationPredictor::new(&mut gen.sub("duration"), &cfg)?;
        let speaker = SpeakerEncoder::new(&mut gen.sub("speaker"), &cfg)?;
        let flow = CouplingStack::new(&mut gen.sub("flow"), &cfg)?;
        let mut disc = root.sub(DISCRIMINATOR);
        let leakage = LeakageDiscriminator::new(&mut disc.sub("leakage"), &cfg)?;
        let timbre = TimbreResidualDiscriminator::new(&mut disc.sub("timbre"), &cfg)?;
        let mel = MelTransform::new(&cfg.stft, dtype, device)?;
        Ok(Self { cfg, store, posterior, decoder, text, duration, speaker, flow, leakage, timbre, mel })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn generator_params(&self) -> Vec<(String, Var)> {
        self.store.select(&[&format!("{GENERATOR}.")])
    }

    pub fn discriminator_params(&self) -> Vec<(String, Var)> {
        self.store.select(&[&format!("{DISCRIMINATOR}.")])
    }
}
