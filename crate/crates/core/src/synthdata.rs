//! Synthetic two-stream transcription task.
//!
//! Each target symbol is emitted as `r_a` audio frames and `r_v` video
//! frames of a fixed per-symbol codebook vector plus Gaussian noise.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::matryoshka::{Modality, RateGrid, TokenSequence};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct SynthSpec {
    pub vocab_size: usize,
    /// Inclusive `[S_min, S_max]`.
    pub target_len_range: [usize; 2],
    pub audio_repeat: usize,
    pub video_repeat: usize,
    pub audio_dim: usize,
    pub video_dim: usize,
    pub noise_sigma: f64,
    /// Probability that one of the two streams (picked uniformly) is
    /// replaced by zeros.
    pub stream_drop_prob: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab_size: 32,
            target_len_range: [8, 24],
            audio_repeat: 16,
            video_repeat: 5,
            audio_dim: 32,
            video_dim: 32,
            noise_sigma: 0.05,
            stream_drop_prob: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.target_len_range;
        if self.vocab_size == 0 || lo == 0 || lo > hi {
            return Err(Error::contract(format!(
                "need vocab_size > 0 and 1 <= S_min <= S_max, got {} and {:?}",
                self.vocab_size, self.target_len_range
            )));
        }
        if self.audio_repeat == 0 || self.video_repeat == 0 || self.audio_dim == 0 || self.video_dim == 0 {
            return Err(Error::contract("repeats and feature dims must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::contract(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.stream_drop_prob) {
            return Err(Error::contract(format!(
                "stream_drop_prob {} must lie in [0, 1]",
                self.stream_drop_prob
            )));
        }
        Ok(())
    }

    /// Repeats must cover the coarsest rate of the grid.
    pub fn validate_for_grid(&self, grid: &RateGrid) -> Result<()> {
        self.validate()?;
        if self.audio_repeat < grid.max_audio_rate() || self.video_repeat < grid.max_video_rate() {
            return Err(Error::contract(format!(
                "repeats ({}, {}) are below the grid's largest rates ({}, {})",
                self.audio_repeat,
                self.video_repeat,
                grid.max_audio_rate(),
                grid.max_video_rate()
            )));
        }
        Ok(())
    }

    pub fn max_audio_frames(&self) -> usize {
        self.target_len_range[1] * self.audio_repeat
    }

    pub fn max_video_frames(&self) -> usize {
        self.target_len_range[1] * self.video_repeat
    }
}

/// Per-symbol unit-Gaussian embeddings for each stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    /// `V × d_a`.
    pub audio: Tensor,
    /// `V × d_v`.
    pub video: Tensor,
}

impl Codebooks {
    pub fn new(spec: &SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(u64::MAX);
        let mut draw = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
            Tensor::matrix(rows, cols, data).expect("sized")
        };
        let audio = draw(spec.vocab_size, spec.audio_dim);
        let video = draw(spec.vocab_size, spec.video_dim);
        Codebooks { audio, video }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub target: Vec<usize>,
    /// `S·r_a × d_a`.
    pub audio: Tensor,
    /// `S·r_v × d_v`.
    pub video: Tensor,
}

impl Sample {
    pub fn stream(&self, m: Modality) -> Result<&Tensor> {
        match m {
            Modality::Audio => Ok(&self.audio),
            Modality::Video => Ok(&self.video),
            Modality::Text => Err(Error::contract("text is not a feature stream")),
        }
    }

    pub fn audio_seq(&self) -> Result<TokenSequence> {
        TokenSequence::source(Modality::Audio, self.audio.clone())
    }

    pub fn video_seq(&self) -> Result<TokenSequence> {
        TokenSequence::source(Modality::Video, self.video.clone())
    }
}

/// Dataset split; its id selects the random stream family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Independent generator for sample `index` of `split`.
pub fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.id() << 32) | index as u64);
    rng
}

fn emit(codebook: &Tensor, symbols: &[usize], repeat: usize, sigma: f64, rng: &mut impl Rng) -> Tensor {
    let d = codebook.cols();
    let mut data = Vec::with_capacity(symbols.len() * repeat * d);
    for &s in symbols {
        let row = codebook.row(s);
        for _ in 0..repeat {
            for &c in row {
                let noise: f64 = if sigma > 0.0 {
                    sigma * Distribution::<f64>::sample(&StandardNormal, rng)
                } else {
                    0.0
                };
                data.push(c + noise);
            }
        }
    }
    Tensor::matrix(symbols.len() * repeat, d, data).expect("sized")
}

pub fn generate_sample(spec: &SynthSpec, books: &Codebooks, rng: &mut impl Rng) -> Sample {
    let [lo, hi] = spec.target_len_range;
    let s = rng.random_range(lo..=hi);
    let target: Vec<usize> = (0..s).map(|_| rng.random_range(0..spec.vocab_size)).collect();
    let mut audio = emit(&books.audio, &target, spec.audio_repeat, spec.noise_sigma, rng);
    let mut video = emit(&books.video, &target, spec.video_repeat, spec.noise_sigma, rng);
    if spec.stream_drop_prob > 0.0 && rng.random_bool(spec.stream_drop_prob) {
        let victim = if rng.random_bool(0.5) { &mut audio } else { &mut video };
        victim.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    Sample { target, audio, video }
}

/// `count` samples of `split`, each from its own derived generator.
pub fn generate_split(spec: &SynthSpec, split: Split, count: usize, exec: &impl Executor) -> Result<Vec<Sample>> {
    spec.validate()?;
    let books = Codebooks::new(spec);
    Ok(exec.map(count, |k| {
        let mut rng = sample_rng(spec.seed, split, k);
        generate_sample(spec, &books, &mut rng)
    }))
}

pub fn signal_power(x: &Tensor) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Empirical SNR in dB of `noisy` against `clean`.
pub fn measured_snr_db(clean: &Tensor, noisy: &Tensor) -> f64 {
    let noise: f64 = clean
        .data()
        .iter()
        .zip(noisy.data())
        .map(|(c, n)| (n - c) * (n - c))
        .sum::<f64>()
        / clean.len().max(1) as f64;
    10.0 * math::log10(signal_power(clean) / noise)
}

/// Adds Gaussian noise to one stream at exactly `snr_db`: the draw is
/// rescaled so its empirical power is `P_signal / 10^(snr/10)`. `+∞`
/// returns the sample unchanged.
pub fn corrupt_stream(sample: &Sample, modality: Modality, snr_db: f64, rng: &mut impl Rng) -> Result<Sample> {
    if snr_db == f64::INFINITY {
        return Ok(sample.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::contract(format!("snr_db {snr_db} must be finite or +inf")));
    }
    let clean = sample.stream(modality)?;
    let ps = signal_power(clean);
    if ps == 0.0 {
        return Err(Error::contract(format!("{modality:?} stream has zero power")));
    }
    let mut noise: Vec<f64> = (0..clean.len()).map(|_| StandardNormal.sample(rng)).collect();
    let pn = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
    let target = ps / math::pow10(snr_db / 10.0);
    let k = math::sqrt(target / pn);
    noise.iter_mut().for_each(|v| *v *= k);
    let mut out = sample.clone();
    let s = match modality {
        Modality::Audio => &mut out.audio,
        _ => &mut out.video,
    };
    s.data_mut().iter_mut().zip(&noise).for_each(|(v, n)| *v += n);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Sequential;

    fn clean(s: usize) -> SynthSpec {
        SynthSpec {
            target_len_range: [s, s],
            audio_repeat: 4,
            noise_sigma: 0.0,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn clean_frames_repeat_codebook() {
        let spec = clean(3);
        let books = Codebooks::new(&spec);
        let s = generate_sample(&spec, &books, &mut sample_rng(0, Split::Train, 0));
        assert_eq!(s.audio.shape(), &[12, 32]);
        for f in 0..12 {
            assert_eq!(s.audio.row(f), books.audio.row(s.target[f / 4]));
        }
    }

    #[test]
    fn splits_are_reproducible_and_distinct() {
        let spec = SynthSpec::default();
        let a = generate_split(&spec, Split::Train, 3, &Sequential).unwrap();
        let b = generate_split(&spec, Split::Train, 3, &Sequential).unwrap();
        let c = generate_split(&spec, Split::Val, 3, &Sequential).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn corruption_hits_requested_snr() {
        let spec = SynthSpec::default();
        let s = generate_split(&spec, Split::Test, 1, &Sequential).unwrap().remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for snr in [-5.0, 0.0, 10.0] {
            let n = corrupt_stream(&s, Modality::Audio, snr, &mut rng).unwrap();
            assert!((measured_snr_db(&s.audio, &n.audio) - snr).abs() < 0.1);
            assert_eq!(n.video, s.video);
        }
        assert_eq!(corrupt_stream(&s, Modality::Video, f64::INFINITY, &mut rng).unwrap(), s);
        assert!(corrupt_stream(&s, Modality::Video, f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn zero_power_is_rejected() {
        let s = Sample {
            target: alloc::vec![0],
            audio: Tensor::zeros(&[2, 2]),
            video: Tensor::zeros(&[2, 2]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            corrupt_stream(&s, Modality::Audio, 0.0, &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn grid_check() {
        let grid = RateGrid::new(alloc::vec![4, 16], alloc::vec![2, 5]).unwrap();
        assert!(SynthSpec::default().validate_for_grid(&grid).is_ok());
        let short = SynthSpec { video_repeat: 4, ..SynthSpec::default() };
        assert!(short.validate_for_grid(&grid).is_err());
    }
}
