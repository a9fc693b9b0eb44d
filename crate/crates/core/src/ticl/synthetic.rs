//! Desk-scale stand-in tasks: each class is a fixed noiseless pattern on
//! the spectrogram plane, and each sample adds Gaussian noise to it.
//!
//! Tasks are class-disjoint: within a family every class of every task gets
//! its own pattern parameter, and the default `Cycle` family gives
//! consecutive tasks different families altogether.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use super::data::{Dataset, TaskSpec};
use crate::error::{Error, Result};
use crate::frontend::Spectrogram;
use crate::params::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PatternFamily {
    /// Horizontal bands at class-specific frequencies.
    ToneRows,
    /// Straight ridges with class-specific offsets and alternating slope sign.
    Chirps,
    /// Checkerboards with class-specific cell sizes.
    Checkerboards,
    /// Task `i` uses tone rows, chirps, checkerboards for `i mod 3 = 0, 1, 2`.
    Cycle,
}

const CYCLE: [PatternFamily; 3] = [PatternFamily::ToneRows, PatternFamily::Chirps, PatternFamily::Checkerboards];

impl fmt::Display for PatternFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatternFamily::ToneRows => "tones",
            PatternFamily::Chirps => "chirps",
            PatternFamily::Checkerboards => "checkers",
            PatternFamily::Cycle => "cycle",
        })
    }
}

impl FromStr for PatternFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tones" => Ok(PatternFamily::ToneRows),
            "chirps" => Ok(PatternFamily::Chirps),
            "checkers" => Ok(PatternFamily::Checkerboards),
            "cycle" => Ok(PatternFamily::Cycle),
            other => Err(Error::InvalidArgument(format!(
                "unknown pattern family {other:?} (expected tones, chirps, checkers or cycle)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticTaskConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub freq_bins: usize,
    pub frames: usize,
    pub family: PatternFamily,
    /// Standard deviation of the additive Gaussian noise; patterns span
    /// `[0, 1]`.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticTaskConfig {
    /// 4 classes, 50 train / 25 test samples per class, 46 x 56 plane.
    pub fn reference(seed: u64) -> Self {
        SyntheticTaskConfig {
            classes: 4,
            train_per_class: 50,
            test_per_class: 25,
            freq_bins: 46,
            frames: 56,
            family: PatternFamily::Cycle,
            noise: 0.3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.train_per_class == 0 || self.freq_bins < 4 || self.frames < 4 {
            return Err(Error::InvalidArgument(format!(
                "synthetic tasks need >= 2 classes, >= 1 train sample per class and a plane of at least 4 x 4, got {self:?}"
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        Ok(())
    }

    /// Family and within-family round of task `task`.
    fn slot(&self, task: usize, n_tasks: usize) -> (PatternFamily, usize, usize) {
        match self.family {
            PatternFamily::Cycle => (CYCLE[task % 3], task / 3, n_tasks.div_ceil(3)),
            f => (f, task, n_tasks),
        }
    }
}

/// Noiseless class patterns of task `task` out of `n_tasks`, each
/// `[freq_bins x frames]` with values in `[0, 1]`.
pub fn class_patterns(cfg: &SyntheticTaskConfig, task: usize, n_tasks: usize) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let (family, round, rounds) = cfg.slot(task, n_tasks);
    let total = rounds * cfg.classes;
    let (f_n, t_n) = (cfg.freq_bins, cfg.frames);
    (0..cfg.classes)
        .map(|c| {
            let g = round * cfg.classes + c;
            let mut data = Vec::with_capacity(f_n * t_n);
            for f in 0..f_n {
                for t in 0..t_n {
                    data.push(pattern_value(family, g, total, f, t, f_n, t_n));
                }
            }
            Tensor::new(&[f_n, t_n], data)
        })
        .collect()
}

fn pattern_value(family: PatternFamily, g: usize, total: usize, f: usize, t: usize, f_n: usize, t_n: usize) -> f64 {
    let (f, t) = (f as f64, t as f64);
    let (fx, tx) = (f_n as f64, t_n as f64);
    let pos = (g as f64 + 0.5) / total as f64;
    match family {
        PatternFamily::ToneRows => {
            let centre = pos * fx;
            let sigma = (fx / (4.0 * total as f64)).max(0.75);
            (-0.5 * ((f - centre) / sigma).powi(2)).exp()
        }
        PatternFamily::Chirps => {
            // offset ridges sweeping half the band, rising or falling
            let slope = if g % 2 == 0 { 0.5 } else { -0.5 };
            let centre = pos * fx + slope * (t / tx - 0.5) * fx;
            (-0.5 * ((f - centre) / 2.5).powi(2)).exp()
        }
        PatternFamily::Checkerboards => {
            let cell = 3 + 3 * g;
            (((f as usize / cell) + (t as usize / cell)) % 2) as f64
        }
        PatternFamily::Cycle => unreachable!("cycle resolves to a concrete family"),
    }
}

fn render(patterns: &[Tensor], per_class: usize, noise: f64, rng: &mut impl rand::Rng) -> Result<Dataset> {
    let classes = patterns.len();
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut inputs = Vec::with_capacity(per_class * classes);
    let mut labels = Vec::with_capacity(per_class * classes);
    for k in 0..per_class * classes {
        let label = k % classes;
        let p = &patterns[label];
        let values = if noise == 0.0 {
            p.clone()
        } else {
            let data = p.data().iter().map(|&v| v + normal.sample(rng)).collect();
            Tensor::new(p.shape(), data)?
        };
        inputs.push(Spectrogram::new(values)?);
        labels.push(label);
    }
    Dataset::new(inputs, labels)
}

/// Deterministic, class-disjoint task sequence.
pub fn make_synthetic_tasks(cfg: &SyntheticTaskConfig, n_tasks: usize) -> Result<Vec<TaskSpec>> {
    cfg.validate()?;
    if n_tasks == 0 {
        return Err(Error::InvalidArgument("n_tasks must be >= 1".into()));
    }
    (0..n_tasks)
        .map(|i| {
            let patterns = class_patterns(cfg, i, n_tasks)?;
            let (family, round, _) = cfg.slot(i, n_tasks);
            let mut rng = rng_for(cfg.seed, "synthetic.train", i as u64);
            let train = render(&patterns, cfg.train_per_class, cfg.noise, &mut rng)?;
            let mut rng = rng_for(cfg.seed, "synthetic.test", i as u64);
            let test = render(&patterns, cfg.test_per_class, cfg.noise, &mut rng)?;
            Ok(TaskSpec {
                id: i,
                name: format!("{family}-{round}"),
                classes: cfg.classes,
                train,
                test,
            })
        })
        .collect()
}

/// Label of the closest noiseless pattern in squared distance.
pub fn nearest_pattern(patterns: &[Tensor], x: &Spectrogram) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, p) in patterns.iter().enumerate() {
        let d: f64 = p.data().iter().zip(x.values().data()).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}
