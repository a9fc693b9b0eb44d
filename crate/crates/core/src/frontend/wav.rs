//! 16-bit PCM RIFF/WAVE decoding and encoding.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct WavClip {
    pub sample_rate: u32,
    /// Mono samples in `[-1, 1)`.
    pub samples: Vec<f64>,
}

impl WavClip {
    pub fn new(sample_rate: u32, samples: Vec<f64>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument("clip has no samples".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite { op: "wav clip" });
        }
        Ok(WavClip { sample_rate, samples })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

const PCM: u16 = 1;
const EXTENSIBLE: u16 = 0xFFFE;

fn u16_at(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Decodes 16-bit PCM, averaging channels to mono and scaling by 1/32768.
pub fn decode_wav(bytes: &[u8]) -> Result<WavClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Wav("missing RIFF/WAVE header".into()));
    }
    let mut off = 12;
    let mut fmt: Option<(u16, u32, u16)> = None;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32_at(bytes, off + 4) as usize;
        let body = off + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(Error::Wav("truncated fmt chunk".into()));
                }
                let format = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let rate = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                let pcm = format == PCM
                    || (format == EXTENSIBLE && size >= 26 && body + 26 <= bytes.len() && u16_at(bytes, body + 24) == PCM);
                if !pcm {
                    return Err(Error::Wav(format!("unsupported codec (format tag {format:#06x})")));
                }
                if bits != 16 {
                    return Err(Error::Wav(format!("unsupported bit depth {bits}")));
                }
                if channels == 0 || rate == 0 {
                    return Err(Error::Wav("zero channels or sample rate".into()));
                }
                fmt = Some((channels, rate, bits));
            }
            b"data" => {
                let (channels, rate, _) = fmt.ok_or_else(|| Error::Wav("data chunk before fmt chunk".into()))?;
                if body + size > bytes.len() {
                    return Err(Error::Wav(format!(
                        "truncated data chunk: header says {size} bytes, {} present",
                        bytes.len() - body
                    )));
                }
                let frame_bytes = 2 * channels as usize;
                if size % frame_bytes != 0 {
                    return Err(Error::Wav("data size is not a whole number of frames".into()));
                }
                let samples: Vec<f64> = bytes[body..body + size]
                    .chunks_exact(frame_bytes)
                    .map(|frame| {
                        let sum: f64 = frame
                            .chunks_exact(2)
                            .map(|s| i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0)
                            .sum();
                        sum / channels as f64
                    })
                    .collect();
                return WavClip::new(rate, samples).map_err(|_| Error::Wav("empty data chunk".into()));
            }
            _ => {}
        }
        // chunks are word aligned
        off = body + size + (size & 1);
    }
    Err(Error::Wav(if fmt.is_some() {
        "no data chunk".into()
    } else {
        "no fmt chunk".into()
    }))
}

/// Canonical 44-byte-header mono 16-bit PCM.
pub fn encode_wav(clip: &WavClip) -> Vec<u8> {
    let data_len = clip.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}
