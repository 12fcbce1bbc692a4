//! Token compression and assembly of the grid of audio-visual Matryoshka
//! sequences, one per (audio rate, video rate) pair.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Modality {
    Audio,
    Video,
    Text,
}

/// One modality stream at a given compression rate.
///
/// `rate` is the number of source frames each token summarizes; token `k`
/// starts at source frame `k · rate`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub modality: Modality,
    pub rate: usize,
    pub tokens: Tensor,
}

impl TokenSequence {
    pub fn new(modality: Modality, rate: usize, tokens: Tensor) -> Result<Self> {
        if rate == 0 {
            return Err(Error::contract("sequence rate must be at least 1"));
        }
        if !tokens.is_matrix() || tokens.rows() == 0 {
            return Err(Error::shape(
                "TokenSequence::new",
                format!("need a non-empty T×d matrix, got {:?}", tokens.shape()),
            ));
        }
        Ok(TokenSequence {
            modality,
            rate,
            tokens,
        })
    }

    /// Rate-1 source stream.
    pub fn source(modality: Modality, tokens: Tensor) -> Result<Self> {
        TokenSequence::new(modality, 1, tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    /// First source frame covered by each token.
    pub fn frame_starts(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).map(move |k| k * self.rate)
    }
}

/// How a stream is shortened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum CompressionMode {
    /// Average non-overlapping windows.
    #[default]
    Avg,
    /// Concatenate consecutive tokens feature-wise.
    Stack,
}

fn check_rate(r: usize) -> Result<()> {
    if r == 0 {
        return Err(Error::contract("compression rate must be at least 1"));
    }
    Ok(())
}

/// Averages windows of `r` tokens. Output length is `ceil(T / r)`; a final
/// partial window of `p < r` tokens is averaged over `p`.
pub fn compress_avg(seq: &TokenSequence, r: usize) -> Result<TokenSequence> {
    check_rate(r)?;
    if r == 1 {
        return Ok(seq.clone());
    }
    let mut tape = Tape::new();
    let x = tape.constant(seq.tokens.clone());
    let y = tape.pool_avg(x, r)?;
    TokenSequence::new(seq.modality, seq.rate * r, tape.value(y).clone())
}

/// Stacks groups of `r` tokens into `ceil(T / r) × (r · d)`, zero padding
/// the last group.
pub fn compress_stack(seq: &TokenSequence, r: usize) -> Result<TokenSequence> {
    check_rate(r)?;
    if r == 1 {
        return Ok(seq.clone());
    }
    let mut tape = Tape::new();
    let x = tape.constant(seq.tokens.clone());
    let y = tape.pool_stack(x, r)?;
    TokenSequence::new(seq.modality, seq.rate * r, tape.value(y).clone())
}

pub fn compress(seq: &TokenSequence, r: usize, mode: CompressionMode) -> Result<TokenSequence> {
    match mode {
        CompressionMode::Avg => compress_avg(seq, r),
        CompressionMode::Stack => compress_stack(seq, r),
    }
}

/// Compressed length of a `t`-token stream at rate `r` (ceil rule).
pub fn compressed_len(t: usize, r: usize) -> usize {
    t.div_ceil(r.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RatePair {
    pub audio: usize,
    pub video: usize,
}

impl RatePair {
    pub const fn new(audio: usize, video: usize) -> Self {
        RatePair { audio, video }
    }

    pub const UNCOMPRESSED: RatePair = RatePair::new(1, 1);
}

impl core::fmt::Display for RatePair {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "({},{})", self.audio, self.video)
    }
}

/// Position `(i, j)` of a sequence in the grid, flattened row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScaleIndex {
    pub audio: usize,
    pub video: usize,
}

/// `G` audio rates × `L` video rates.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "RawGrid", into = "RawGrid"))]
pub struct RateGrid {
    audio: Vec<usize>,
    video: Vec<usize>,
}

#[cfg(feature = "serde")]
#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    audio_rates: Vec<usize>,
    video_rates: Vec<usize>,
}

#[cfg(feature = "serde")]
impl TryFrom<RawGrid> for RateGrid {
    type Error = Error;
    fn try_from(raw: RawGrid) -> Result<Self> {
        RateGrid::new(raw.audio_rates, raw.video_rates)
    }
}

#[cfg(feature = "serde")]
impl From<RateGrid> for RawGrid {
    fn from(g: RateGrid) -> Self {
        RawGrid {
            audio_rates: g.audio,
            video_rates: g.video,
        }
    }
}

fn check_rates(kind: &str, rates: &[usize]) -> Result<()> {
    if rates.is_empty() {
        return Err(Error::contract(format!("{kind} rate list is empty")));
    }
    if rates.contains(&0) {
        return Err(Error::contract(format!("{kind} rates must be positive")));
    }
    if rates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract(format!(
            "{kind} rates must be strictly increasing, got {rates:?}"
        )));
    }
    Ok(())
}

impl RateGrid {
    pub fn new(audio: Vec<usize>, video: Vec<usize>) -> Result<Self> {
        check_rates("audio", &audio)?;
        check_rates("video", &video)?;
        Ok(RateGrid { audio, video })
    }

    pub fn single(pair: RatePair) -> Self {
        RateGrid {
            audio: alloc::vec![pair.audio.max(1)],
            video: alloc::vec![pair.video.max(1)],
        }
    }

    pub fn audio_rates(&self) -> &[usize] {
        &self.audio
    }

    pub fn video_rates(&self) -> &[usize] {
        &self.video
    }

    /// `G · L`.
    pub fn len(&self) -> usize {
        self.audio.len() * self.video.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rate pairs in row-major `(i, j)` order: finest first.
    pub fn pairs(&self) -> Vec<RatePair> {
        self.audio
            .iter()
            .flat_map(|&a| self.video.iter().map(move |&v| RatePair::new(a, v)))
            .collect()
    }

    pub fn scale_index(&self, flat: usize) -> ScaleIndex {
        ScaleIndex {
            audio: flat / self.video.len(),
            video: flat % self.video.len(),
        }
    }

    pub fn position(&self, pair: RatePair) -> Option<usize> {
        let i = self.audio.iter().position(|&a| a == pair.audio)?;
        let j = self.video.iter().position(|&v| v == pair.video)?;
        Some(i * self.video.len() + j)
    }

    pub fn contains(&self, pair: RatePair) -> bool {
        self.position(pair).is_some()
    }

    /// Flat index of the grid cell closest to `pair` (L1 distance on rates,
    /// ties to the lower index).
    pub fn nearest(&self, pair: RatePair) -> usize {
        let mut best = (usize::MAX, 0);
        for (i, p) in self.pairs().into_iter().enumerate() {
            let d = p.audio.abs_diff(pair.audio) + p.video.abs_diff(pair.video);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    pub fn max_audio_rate(&self) -> usize {
        *self.audio.last().expect("non-empty")
    }

    pub fn max_video_rate(&self) -> usize {
        *self.video.last().expect("non-empty")
    }
}

/// Half-open token ranges of each segment inside an assembled sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    pub audio: Range<usize>,
    pub video: Range<usize>,
    pub prompt: Range<usize>,
    pub target: Range<usize>,
}

impl Segments {
    pub fn from_lengths(audio: usize, video: usize, prompt: usize, target: usize) -> Self {
        let a = 0..audio;
        let v = a.end..a.end + video;
        let p = v.end..v.end + prompt;
        let t = p.end..p.end + target;
        Segments {
            audio: a,
            video: v,
            prompt: p,
            target: t,
        }
    }

    pub fn total(&self) -> usize {
        self.target.end
    }

    pub fn av_tokens(&self) -> usize {
        self.video.end
    }
}

/// One assembled sequence `audio ∥ video ∥ prompt ∥ target` at a rate
/// pair. Audio and video hold compressed but not yet projected features;
/// the model projects and embeds them.
#[derive(Debug, Clone, PartialEq)]
pub struct MatryoshkaSequence {
    pub rates: RatePair,
    pub audio: TokenSequence,
    pub video: TokenSequence,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
    pub segments: Segments,
}

impl MatryoshkaSequence {
    pub fn len(&self) -> usize {
        self.segments.total()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Text ids fed to the model after the AV tokens.
    pub fn text_ids(&self) -> Vec<usize> {
        let mut ids = self.prompt.clone();
        ids.extend_from_slice(&self.target);
        ids
    }

    /// Same AV prefix and prompt with a different target segment.
    pub fn with_target(&self, target: Vec<usize>) -> Self {
        let segments = Segments::from_lengths(
            self.audio.len(),
            self.video.len(),
            self.prompt.len(),
            target.len(),
        );
        MatryoshkaSequence {
            rates: self.rates,
            audio: self.audio.clone(),
            video: self.video.clone(),
            prompt: self.prompt.clone(),
            target,
            segments,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatryoshkaBatch {
    pub grid: RateGrid,
    pub mode: CompressionMode,
    /// Row-major over the grid.
    pub entries: Vec<MatryoshkaSequence>,
}

/// Assembles one sequence at `rates`.
pub fn build_entry(
    audio: &TokenSequence,
    video: &TokenSequence,
    prompt: &[usize],
    target: &[usize],
    rates: RatePair,
    mode: CompressionMode,
) -> Result<MatryoshkaSequence> {
    if audio.rate != 1 || video.rate != 1 {
        return Err(Error::contract("build_batch expects rate-1 source streams"));
    }
    let a = compress(audio, rates.audio, mode)?;
    let v = compress(video, rates.video, mode)?;
    let segments = Segments::from_lengths(a.len(), v.len(), prompt.len(), target.len());
    Ok(MatryoshkaSequence {
        rates,
        audio: a,
        video: v,
        prompt: prompt.to_vec(),
        target: target.to_vec(),
        segments,
    })
}

/// Builds all `G · L` sequences for one sample, row-major over the grid.
pub fn build_batch(
    audio: &TokenSequence,
    video: &TokenSequence,
    prompt: &[usize],
    target: &[usize],
    grid: &RateGrid,
    mode: CompressionMode,
) -> Result<MatryoshkaBatch> {
    if grid.is_empty() {
        return Err(Error::contract("rate grid is empty"));
    }
    let entries = grid
        .pairs()
        .into_iter()
        .map(|p| build_entry(audio, video, prompt, target, p, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(MatryoshkaBatch {
        grid: grid.clone(),
        mode,
        entries,
    })
}
