//! WAV in, log-mel spectrogram out.
//!
//! Synthesizes a one-second 16 kHz sweep, round-trips it through 16-bit
//! PCM, extracts 128 log-mel bands with a 25 ms window and 10 ms hop, and
//! writes the result as an FTT1 tensor file.
//!
//! ```bash
//! cargo run --example log_mel_features [OUT.ftt]
//! ```

use std::f64::consts::PI;

use ftacl::frontend::{decode_wav, encode_wav, log_mel, FrontendConfig, WavClip};
use ftacl::tensor::io as tensor_io;

fn main() -> ftacl::Result<()> {
    let sr = 16_000u32;
    // linear sweep 200 Hz -> 4 kHz
    let samples: Vec<f64> = (0..sr as usize)
        .map(|i| {
            let t = i as f64 / sr as f64;
            0.5 * (2.0 * PI * (200.0 * t + 0.5 * 3800.0 * t * t)).sin()
        })
        .collect();
    let wav = encode_wav(&WavClip::new(sr, samples)?);
    let clip = decode_wav(&wav)?;
    println!("decoded {} samples at {} Hz from {} bytes", clip.samples.len(), clip.sample_rate, wav.len());

    let spec = log_mel(&clip, &FrontendConfig::default())?;
    let [mels, frames] = spec.shape();
    println!("spectrogram [{mels} x {frames}]");
    for frame in [0, frames / 4, frames / 2, 3 * frames / 4, frames - 1] {
        let peak = (0..mels)
            .max_by(|&a, &b| spec.values().get(&[a, frame]).total_cmp(&spec.values().get(&[b, frame])))
            .unwrap_or(0);
        println!("  frame {frame:>3}: loudest band {peak:>3}");
    }

    let out = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("sweep.ftt").display().to_string());
    tensor_io::save(&out, spec.values())?;
    println!("wrote {out}");
    Ok(())
}
