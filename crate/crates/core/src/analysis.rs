//! Diagnostics: expert usage across scales, cross-scale routing overlap,
//! token similarity matrices and token/compute accounting.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::backbone::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::matryoshka::{build_entry, compressed_len, RateGrid, RatePair};
use crate::math;
use crate::mome::{active_param_count, MomeConfig};
use crate::params::{Graph, Trainable};
use crate::synthdata::Sample;
use crate::tensor::Tensor;

/// Top-k selection counts per layer, grid cell and expert.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ActivationHistogram {
    pub grid: RateGrid,
    pub n_experts: usize,
    /// `[layer][scale][expert]`.
    pub counts: Vec<Vec<Vec<u64>>>,
}

impl ActivationHistogram {
    pub fn new(grid: RateGrid, counts: Vec<Vec<Vec<u64>>>) -> Result<Self> {
        let n_experts = counts
            .first()
            .and_then(|l| l.first())
            .map_or(0, Vec::len);
        for layer in &counts {
            if layer.len() != grid.len() || layer.iter().any(|s| s.len() != n_experts) {
                return Err(Error::shape(
                    "ActivationHistogram",
                    format!("counts must be layers × {} scales × {n_experts} experts", grid.len()),
                ));
            }
        }
        Ok(ActivationHistogram { grid, n_experts, counts })
    }

    pub fn n_layers(&self) -> usize {
        self.counts.len()
    }

    /// Selection frequencies of one (layer, scale); sums to 1 when any
    /// token was routed.
    pub fn frequencies(&self, layer: usize, scale: usize) -> Vec<f64> {
        let c = &self.counts[layer][scale];
        let total: u64 = c.iter().sum();
        if total == 0 {
            return vec![0.0; c.len()];
        }
        c.iter().map(|&x| x as f64 / total as f64).collect()
    }

    /// Indices of the `m` most frequent experts; ties go to the lower index.
    pub fn top_experts(&self, layer: usize, scale: usize, m: usize) -> Vec<usize> {
        let c = &self.counts[layer][scale];
        let mut idx: Vec<usize> = (0..c.len()).collect();
        idx.sort_by(|&a, &b| c[b].cmp(&c[a]).then(a.cmp(&b)));
        idx.truncate(m);
        idx.sort_unstable();
        idx
    }
}

/// Tallies routed-expert selections over every token of every sample
/// (teacher-forced with its transcript) at every grid cell.
pub fn expert_activation_stats(model: &Model, data: &[Sample], exec: &impl Executor) -> Result<ActivationHistogram> {
    let ad = model
        .adapters()
        .ok_or_else(|| Error::contract("model has no adapters attached"))?;
    let grid = ad.spec.grid.clone();
    let (n_layers, n_exp) = (model.cfg.n_layers, ad.spec.mome.n_routed);
    if n_exp == 0 {
        return Err(Error::contract("configuration has no routed experts"));
    }
    let vocab = model.vocab();
    let pairs = grid.pairs();
    let per_sample = exec.map(data.len(), |i| -> Result<Vec<Vec<Vec<u64>>>> {
        let s = &data[i];
        let (a, v) = (s.audio_seq()?, s.video_seq()?);
        let target = vocab.target(&s.target);
        let mut counts = vec![vec![vec![0u64; n_exp]; pairs.len()]; n_layers];
        for (sc, &p) in pairs.iter().enumerate() {
            let entry = build_entry(&a, &v, &vocab.prompt(), &target, p, ad.spec.mode)?;
            let mut g = Graph::new(&model.store, Trainable::NONE);
            let out = model.forward(&mut g, &entry, Some(sc))?;
            for (l, r) in out.routing.iter().enumerate() {
                if let Some(r) = r {
                    for (c, n) in counts[l][sc].iter_mut().zip(r.gate.counts()) {
                        *c += n as u64;
                    }
                }
            }
        }
        Ok(counts)
    });
    let mut total = vec![vec![vec![0u64; n_exp]; pairs.len()]; n_layers];
    for c in per_sample {
        let c = c?;
        for (tl, cl) in total.iter_mut().zip(&c) {
            for (ts, cs) in tl.iter_mut().zip(cl) {
                for (t, x) in ts.iter_mut().zip(cs) {
                    *t += x;
                }
            }
        }
    }
    ActivationHistogram::new(grid, total)
}

fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per layer: Jaccard index of the top-`m` expert sets, averaged over all
/// unordered pairs of grid cells.
pub fn cross_scale_overlap(hist: &ActivationHistogram, m: usize) -> Result<Vec<f64>> {
    if m == 0 || m > hist.n_experts {
        return Err(Error::contract(format!(
            "m = {m} must lie in 1..={}",
            hist.n_experts
        )));
    }
    let g = hist.grid.len();
    if g < 2 {
        return Err(Error::contract("cross-scale overlap needs at least two grid cells"));
    }
    Ok((0..hist.n_layers())
        .map(|l| {
            let tops: Vec<Vec<usize>> = (0..g).map(|s| hist.top_experts(l, s, m)).collect();
            let mut sum = 0.0;
            let mut pairs = 0;
            for i in 0..g {
                for j in i + 1..g {
                    sum += jaccard(&tops[i], &tops[j]);
                    pairs += 1;
                }
            }
            sum / pairs as f64
        })
        .collect())
}

/// Pairwise cosine similarities between the rows of two token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    /// `rows(a) × rows(b)`.
    pub values: Tensor,
    /// Rows of `a` with zero norm (their similarities are set to 0).
    pub zero_rows: Vec<usize>,
    pub zero_cols: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn has_zero_norm(&self) -> bool {
        !self.zero_rows.is_empty() || !self.zero_cols.is_empty()
    }
}

fn norms(x: &Tensor) -> Vec<f64> {
    (0..x.rows())
        .map(|r| math::sqrt(x.row(r).iter().map(|v| v * v).sum()))
        .collect()
}

pub fn similarity_matrix(a: &Tensor, b: &Tensor) -> Result<SimilarityMatrix> {
    if !a.is_matrix() || !b.is_matrix() || a.cols() != b.cols() {
        return Err(Error::shape(
            "similarity_matrix",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (na, nb) = (norms(a), norms(b));
    let mut values = Vec::with_capacity(a.rows() * b.rows());
    for (i, &ni) in na.iter().enumerate() {
        for (j, &nj) in nb.iter().enumerate() {
            if ni == 0.0 || nj == 0.0 {
                values.push(0.0);
                continue;
            }
            let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            values.push((dot / (ni * nj)).clamp(-1.0, 1.0));
        }
    }
    let zeros = |n: &[f64]| n.iter().enumerate().filter(|(_, &v)| v == 0.0).map(|(i, _)| i).collect();
    Ok(SimilarityMatrix {
        values: Tensor::matrix(a.rows(), b.rows(), values)?,
        zero_rows: zeros(&na),
        zero_cols: zeros(&nb),
    })
}

/// Fine-rate tokens whose source frames overlap coarse token `k`.
pub fn covering_window(k: usize, coarse_rate: usize, fine_rate: usize, source_len: usize) -> Range<usize> {
    let start = k * coarse_rate;
    let end = ((k + 1) * coarse_rate).min(source_len);
    start / fine_rate..end.div_ceil(fine_rate)
}

/// How many coarse tokens (rows) attain their row maximum inside their
/// covering fine window.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WindowAlignment {
    pub inside: usize,
    pub total: usize,
}

impl WindowAlignment {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            return 1.0;
        }
        self.inside as f64 / self.total as f64
    }
}

/// A row counts as aligned when the best entry inside its window is within
/// `tol` of the row maximum, so exact ties with repeated content elsewhere
/// in the sequence do not count against it.
pub fn window_alignment(
    sim: &SimilarityMatrix,
    coarse_rate: usize,
    fine_rate: usize,
    source_len: usize,
    tol: f64,
) -> WindowAlignment {
    let v = &sim.values;
    let mut inside = 0;
    for k in 0..v.rows() {
        let row = v.row(k);
        let w = covering_window(k, coarse_rate, fine_rate, source_len);
        let w = w.start.min(row.len())..w.end.min(row.len());
        let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let in_w = row[w].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if in_w >= best - tol {
            inside += 1;
        }
    }
    WindowAlignment {
        inside,
        total: v.rows(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Rounding {
    #[default]
    Ceil,
    Floor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostRow {
    pub rates: RatePair,
    pub audio_tokens: usize,
    pub video_tokens: usize,
    pub total_tokens: usize,
    pub flops: f64,
    pub active_adapter_params: usize,
}

/// Compressed stream lengths at `rates`.
pub fn token_count(t_audio: usize, t_video: usize, rates: RatePair, rounding: Rounding) -> Result<(usize, usize)> {
    if t_audio == 0 || t_video == 0 || rates.audio == 0 || rates.video == 0 {
        return Err(Error::contract("stream lengths and rates must be positive"));
    }
    Ok(match rounding {
        Rounding::Ceil => (compressed_len(t_audio, rates.audio), compressed_len(t_video, rates.video)),
        Rounding::Floor => (t_audio / rates.audio, t_video / rates.video),
    })
}

/// Forward FLOPs of the backbone on `tokens` tokens, counting a
/// multiply-add as 2:
///
/// * per layer: `8·T·d²` (Q, K, V, O) `+ 4·T²·d` (scores and weighted sum)
///   `+ 4·T·d·f` (MLP)
/// * MoME per layer: `2·T·d·N_r` (router) `+ (N_s + K)·4·T·d·b`
/// * output head: `2·T·d·V`
pub fn flops_estimate(cfg: &ModelConfig, mome: Option<&MomeConfig>, tokens: usize) -> f64 {
    let t = tokens as f64;
    let d = cfg.d_model as f64;
    let f = cfg.ffn_hidden as f64;
    let mut layer = 8.0 * t * d * d + 4.0 * t * t * d + 4.0 * t * d * f;
    if let Some(m) = mome {
        layer += 2.0 * t * d * m.n_routed as f64 + (m.n_shared + m.top_k) as f64 * 4.0 * t * d * m.bottleneck as f64;
    }
    cfg.n_layers as f64 * layer + 2.0 * t * d * cfg.vocab_size as f64
}

/// Token and compute cost of one pair of source streams at each rate pair.
pub fn cost_report(
    cfg: &ModelConfig,
    mome: Option<&MomeConfig>,
    t_audio: usize,
    t_video: usize,
    pairs: &[RatePair],
    rounding: Rounding,
) -> Result<Vec<CostRow>> {
    let active = mome.map_or(0, |m| active_param_count(m, cfg.d_model, cfg.n_layers).active);
    pairs
        .iter()
        .map(|&rates| {
            let (a, v) = token_count(t_audio, t_video, rates, rounding)?;
            Ok(CostRow {
                rates,
                audio_tokens: a,
                video_tokens: v,
                total_tokens: a + v,
                flops: flops_estimate(cfg, mome, a + v),
                active_adapter_params: active,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covering_windows() {
        // coarse rate 16 over fine rate 4: token k covers fine 4k..4k+4
        assert_eq!(covering_window(2, 16, 4, 100), 8..12);
        // ragged tail
        assert_eq!(covering_window(6, 16, 4, 100), 24..25);
        // non-divisible rates overlap two fine tokens
        assert_eq!(covering_window(1, 5, 2, 20), 2..5);
    }

    #[test]
    fn similarity_basics() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let s = similarity_matrix(&a, &a).unwrap();
        assert_eq!(s.values.get2(0, 0), 1.0);
        assert_eq!(s.values.get2(1, 1), 1.0);
        assert_eq!(s.values.get2(0, 1), 0.0);
        assert_eq!(s.zero_rows, vec![2]);
        assert!(s.has_zero_norm());
        let b = Tensor::zeros(&[2, 3]);
        assert!(similarity_matrix(&a, &b).is_err());
    }

    #[test]
    fn table_six_lengths() {
        let c = token_count(1106, 567, RatePair { audio: 16, video: 5 }, Rounding::Ceil).unwrap();
        assert_eq!(c, (70, 114));
        let f = token_count(1106, 567, RatePair { audio: 4, video: 2 }, Rounding::Floor).unwrap();
        assert_eq!(f, (276, 283));
        assert!(token_count(0, 5, RatePair::UNCOMPRESSED, Rounding::Ceil).is_err());
    }

    #[test]
    fn overlap_extremes() {
        let grid = RateGrid::new(vec![1, 2], vec![1]).unwrap();
        let same = ActivationHistogram::new(grid.clone(), vec![vec![vec![5, 1, 9], vec![5, 1, 9]]]).unwrap();
        assert_eq!(cross_scale_overlap(&same, 2).unwrap(), vec![1.0]);
        let apart = ActivationHistogram::new(grid, vec![vec![vec![9, 0, 0, 8], vec![0, 7, 6, 0]]]).unwrap();
        assert_eq!(cross_scale_overlap(&apart, 2).unwrap(), vec![0.0]);
        assert!(cross_scale_overlap(&apart, 5).is_err());
    }

    #[test]
    fn top_experts_tie_break() {
        let grid = RateGrid::single(RatePair::UNCOMPRESSED);
        let h = ActivationHistogram::new(grid, vec![vec![vec![3, 5, 5, 3]]]).unwrap();
        assert_eq!(h.top_experts(0, 0, 3), vec![0, 1, 2]);
    }
}
