//! Log-mel front end: geometry, silence, a pure-tone oracle and WAV I/O.

mod common;

use std::f64::consts::PI;

use common::oracle::{mel_edges, triangle};
use common::rng;
use ftacl::frontend::{decode_wav, encode_wav, frame_count, log_mel, FrontendConfig, Spectrogram, WavClip};
use ftacl::Error;
use proptest::prelude::*;
use rand::Rng;

const SR: u32 = 16_000;

fn noise_clip(n: usize, seed: u64) -> WavClip {
    let mut r = rng(seed);
    WavClip::new(SR, (0..n).map(|_| r.random_range(-0.5..0.5)).collect()).unwrap()
}

fn tone(hz: f64, n: usize, amp: f64) -> WavClip {
    WavClip::new(SR, (0..n).map(|i| amp * (2.0 * PI * hz * i as f64 / SR as f64).sin()).collect()).unwrap()
}

/// Edges of 128 HTK triangles spanning 0 .. 8 kHz.
fn edges() -> Vec<f64> {
    mel_edges(128, SR as f64 / 2.0)
}

fn column(s: &Spectrogram, frame: usize) -> Vec<f64> {
    (0..s.mels()).map(|m| s.values().get(&[m, frame])).collect()
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

#[test]
fn reference_clip_shapes() {
    let cfg = FrontendConfig::default();
    assert_eq!(log_mel(&noise_clip(16_000, 1), &cfg).unwrap().shape(), [128, 101]);
    assert_eq!(log_mel(&noise_clip(80_000, 2), &cfg).unwrap().shape(), [128, 501]);
}

#[test]
fn silence_is_the_log_floor_everywhere() {
    let s = log_mel(&WavClip::new(SR, vec![0.0; 16_000]).unwrap(), &FrontendConfig::default()).unwrap();
    let floor = 1e-10f64.ln();
    assert!(s.values().data().iter().all(|v| v.to_bits() == floor.to_bits()));
}

#[test]
fn pure_tone_peaks_in_the_band_containing_it() {
    let s = log_mel(&tone(1000.0, 16_000, 0.5), &FrontendConfig::default()).unwrap();
    let e = edges();
    let weights: Vec<f64> = (0..128).map(|b| triangle(&e, b, 1000.0)).collect();
    let expected = argmax(&weights);
    assert!(e[expected] < 1000.0 && 1000.0 < e[expected + 2]);
    for frame in [20, 50, 80] {
        assert_eq!(argmax(&column(&s, frame)), expected, "frame {frame}");
    }
}

/// Interior frame recomputed with a direct DFT and separately built
/// triangles. The power spectrum does not depend on where the window sits
/// inside the FFT buffer, so only the window centre and length matter.
#[test]
fn interior_frame_matches_direct_dft_oracle() {
    let clip = noise_clip(4_000, 3);
    let s = log_mel(&clip, &FrontendConfig::default()).unwrap();
    let (win, hop, n_fft) = (400usize, 160usize, 1024usize);
    let frame = 10;
    let start = frame * hop - win / 2;
    let e = edges();
    let mut energy = vec![0.0; 128];
    for k in 0..=n_fft / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for n in 0..win {
            let w = 0.54 - 0.46 * (2.0 * PI * n as f64 / win as f64).cos();
            let x = clip.samples[start + n] * w;
            let ph = -2.0 * PI * (k * n) as f64 / n_fft as f64;
            re += x * ph.cos();
            im += x * ph.sin();
        }
        let hz = k as f64 * SR as f64 / n_fft as f64;
        for (b, acc) in energy.iter_mut().enumerate() {
            *acc += triangle(&e, b, hz) * (re * re + im * im);
        }
    }
    for (b, got) in column(&s, frame).into_iter().enumerate() {
        assert!((got - energy[b].max(1e-10).ln()).abs() < 1e-8, "band {b}");
    }
}

#[test]
fn wav_round_trip_feeds_the_same_features() {
    let clip = tone(440.0, 8_000, 0.8);
    let decoded = decode_wav(&encode_wav(&clip)).unwrap();
    assert_eq!(decoded.samples.len(), clip.samples.len());
    assert!(decoded.samples.iter().zip(&clip.samples).all(|(a, b)| (a - b).abs() <= 1.0 / 32768.0));
    assert_eq!(log_mel(&decoded, &FrontendConfig::default()).unwrap().shape(), [128, 51]);
}

#[test]
fn truncated_wav_is_a_decode_error() {
    let bytes = encode_wav(&tone(440.0, 1_000, 0.5));
    for cut in [10, 30, 43] {
        assert!(matches!(decode_wav(&bytes[..cut]), Err(Error::Wav(_))), "cut at {cut}");
    }
    // a data chunk shorter than its declared size
    let short = decode_wav(&bytes[..bytes.len() - 101]);
    assert!(matches!(short, Err(Error::Wav(_))));
}

#[test]
fn shorter_than_a_hop_is_rejected() {
    assert!(log_mel(&noise_clip(100, 4), &FrontendConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn frame_count_follows_hop(n in 160usize..6_000, seed in any::<u64>()) {
        let s = log_mel(&noise_clip(n, seed), &FrontendConfig::default()).unwrap();
        prop_assert_eq!(s.frames(), n / 160 + 1);
        prop_assert_eq!(frame_count(n, 160), n / 160 + 1);
        prop_assert!(s.values().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn louder_never_lowers_an_unfloored_bin(c in 1.0f64..20.0, seed in any::<u64>()) {
        let cfg = FrontendConfig::default();
        let clip = noise_clip(3_200, seed);
        let loud = WavClip::new(SR, clip.samples.iter().map(|v| v * c).collect()).unwrap();
        let (a, b) = (log_mel(&clip, &cfg).unwrap(), log_mel(&loud, &cfg).unwrap());
        let floor = cfg.log_floor.ln();
        for (x, y) in a.values().data().iter().zip(b.values().data()) {
            if *x > floor {
                prop_assert!(y >= x);
            }
        }
    }
}
