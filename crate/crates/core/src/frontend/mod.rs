//! WAV decoding and the 128-bin log-mel front end.

mod mel;
mod wav;

pub use mel::{frame_count, hz_to_mel, log_mel, mel_filterbank, mel_to_hz, Framing, FrontendConfig};
pub use wav::{decode_wav, encode_wav, WavClip};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Log-mel energies, `[n_mels x frames]` (frequency rows, time columns).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    values: Tensor,
}

impl Spectrogram {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::shape("spectrogram", "[mels x frames]", format!("{:?}", values.shape())));
        }
        Ok(Spectrogram { values })
    }

    pub fn mels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.mels(), self.frames()]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }
}
