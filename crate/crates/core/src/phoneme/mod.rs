//! Phoneme encoder: text encoder, monotonic alignment, frame expansion and
//! duration prediction.

pub mod align;
pub mod duration;
pub mod text_encoder;
pub mod vocab;

pub use align::{align_batch, expand_exact, expand_to_frames, monotonic_align, Alignment};
pub use duration::{duration_loss, round_durations, DurationPredictor};
pub use text_encoder::{PhonemeStats, TextEncoder};
pub use vocab::Vocabulary;
