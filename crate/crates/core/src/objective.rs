//! Multi-scale language-model loss and the load-balancing auxiliary loss.
//!
//! * `L_LM = (1 / (G·L)) Σ_ij c_ij · nll_ij`
//! * `L_B  = N_r · Σ_n f_n · P_n`, per layer and grid cell, where `f_n` is
//!   the share of top-k assignments that went to expert `n` and `P_n` its
//!   mean router probability.
//! * `total = L_LM + coef · mean(L_B)` with `coef = 0.01` by default.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mome::GateOutput;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BALANCE_COEF: f64 = 0.01;

/// Per-cell weights `c_ij`, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleWeights {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl ScaleWeights {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape(
                "ScaleWeights::new",
                format!("{rows}x{cols} grid needs {} weights, got {}", rows * cols, values.len()),
            ));
        }
        if values.iter().any(|&c| !(c >= 0.0) || !c.is_finite()) {
            return Err(Error::contract("scale weights must be finite and non-negative"));
        }
        if !values.iter().any(|&c| c > 0.0) {
            return Err(Error::contract("at least one scale weight must be positive"));
        }
        Ok(ScaleWeights { rows, cols, values })
    }

    pub fn uniform(rows: usize, cols: usize) -> Self {
        ScaleWeights {
            rows,
            cols,
            values: vec![1.0; rows * cols],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_len(n: usize, weights: &ScaleWeights) -> Result<()> {
    if n != weights.len() {
        return Err(Error::shape(
            "matryoshka_lm_loss",
            format!("{n} per-scale losses vs {:?} weights", weights.dims()),
        ));
    }
    Ok(())
}

/// `(1/(G·L)) Σ c_ij nll_ij` over row-major per-scale NLLs.
pub fn matryoshka_lm_loss(per_scale_nll: &[f64], weights: &ScaleWeights) -> Result<f64> {
    check_len(per_scale_nll.len(), weights)?;
    let s: f64 = per_scale_nll
        .iter()
        .zip(weights.values())
        .map(|(n, c)| n * c)
        .sum();
    Ok(s / per_scale_nll.len() as f64)
}

/// Recorded form of [`matryoshka_lm_loss`].
pub fn matryoshka_lm_loss_var(tape: &mut Tape, per_scale_nll: &[Var], weights: &ScaleWeights) -> Result<Var> {
    check_len(per_scale_nll.len(), weights)?;
    let n = per_scale_nll.len() as f64;
    let mut acc: Option<Var> = None;
    for (&v, &c) in per_scale_nll.iter().zip(weights.values()) {
        let term = tape.scale(v, c / n);
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::contract("no scales"))
}

/// How expert fractions `f_n` are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum BalanceNorm {
    /// `count_n / (K · tokens)`; fractions sum to 1 and the uniform
    /// optimum is `L_B = 1` for every `K`.
    #[default]
    PerAssignment,
    /// `count_n / tokens`; fractions sum to `K`.
    PerToken,
}

/// Routing statistics of one layer at one grid cell.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LoadBalanceStats {
    /// Share of assignments per expert.
    pub f: Vec<f64>,
    /// Mean routing probability per expert.
    pub p: Vec<f64>,
    pub tokens: usize,
}

impl LoadBalanceStats {
    pub fn from_gate(gate: &GateOutput, norm: BalanceNorm) -> Result<Self> {
        let t = gate.tokens();
        if t == 0 {
            return Err(Error::contract("load-balance statistics need at least one token"));
        }
        let n = gate.n_experts();
        let k = gate.selected.first().map_or(0, Vec::len);
        let denom = match norm {
            BalanceNorm::PerAssignment => (k * t) as f64,
            BalanceNorm::PerToken => t as f64,
        };
        let f = gate.counts().into_iter().map(|c| c as f64 / denom).collect();
        let mut p = vec![0.0; n];
        for r in 0..t {
            for (o, &s) in p.iter_mut().zip(gate.scores.row(r)) {
                *o += s;
            }
        }
        for o in &mut p {
            *o /= t as f64;
        }
        Ok(LoadBalanceStats { f, p, tokens: t })
    }
}

/// `N_r · Σ f_n P_n`.
pub fn load_balance_loss(stats: &LoadBalanceStats, n_routed: usize) -> Result<f64> {
    if stats.tokens == 0 {
        return Err(Error::contract("load-balance loss needs at least one token"));
    }
    if stats.f.len() != n_routed || stats.p.len() != n_routed {
        return Err(Error::shape(
            "load_balance_loss",
            format!("{} / {} statistics for {n_routed} experts", stats.f.len(), stats.p.len()),
        ));
    }
    let s: f64 = stats.f.iter().zip(&stats.p).map(|(f, p)| f * p).sum();
    Ok(n_routed as f64 * s)
}

/// Recorded balance loss: `f` enters as a constant, so gradients reach the
/// router only through `P`.
pub fn load_balance_loss_var(
    tape: &mut Tape,
    scores: Var,
    gate: &GateOutput,
    norm: BalanceNorm,
) -> Result<(Var, LoadBalanceStats)> {
    let stats = LoadBalanceStats::from_gate(gate, norm)?;
    let n = stats.f.len();
    let p = tape.mean_rows(scores)?;
    let f = tape.constant(Tensor::vector(stats.f.clone()));
    let fp = tape.mul(p, f)?;
    let s = tape.sum(fp);
    Ok((tape.scale(s, n as f64), stats))
}

/// `lm + coef · mean(balance)`; with no balance terms the total is `lm`.
pub fn total_loss(lm: f64, balance: &[f64], coef: f64) -> f64 {
    if balance.is_empty() {
        return lm;
    }
    lm + coef * (balance.iter().sum::<f64>() / balance.len() as f64)
}

pub fn total_loss_var(tape: &mut Tape, lm: Var, balance: &[Var], coef: f64) -> Result<Var> {
    if balance.is_empty() || coef == 0.0 {
        return Ok(lm);
    }
    let mut acc = balance[0];
    for &b in &balance[1..] {
        acc = tape.add(acc, b)?;
    }
    let scaled = tape.scale(acc, coef / balance.len() as f64);
    tape.add(lm, scaled)
}

/// Loss breakdown of one optimizer step (or one evaluation pass).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    /// Row-major `G × L` mean token NLL.
    pub per_scale_nll: Vec<f64>,
    pub lm_loss: f64,
    pub mean_balance_loss: f64,
    pub total: f64,
    /// `[layer][scale]`.
    pub balance: Vec<Vec<LoadBalanceStats>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mome::topk_gate;

    fn gate_from(rows: &[Vec<f64>], k: usize) -> GateOutput {
        topk_gate(&Tensor::from_rows(rows).unwrap(), k).unwrap()
    }

    #[test]
    fn lm_loss_cases() {
        let w = ScaleWeights::uniform(1, 1);
        assert_eq!(matryoshka_lm_loss(&[2.5], &w).unwrap(), 2.5);
        let w = ScaleWeights::uniform(2, 2);
        assert_eq!(matryoshka_lm_loss(&[0.7; 4], &w).unwrap(), 0.7);
        let nuw = ScaleWeights::new(2, 2, vec![1.0, 1.0, 1.5, 2.0]).unwrap();
        let nll = [1.0, 2.0, 3.0, 4.0];
        // (1 + 2 + 4.5 + 8) / 4
        assert_eq!(matryoshka_lm_loss(&nll, &nuw).unwrap(), 15.5 / 4.0);
        assert!(matryoshka_lm_loss(&nll[..3], &nuw).is_err());
    }

    #[test]
    fn weights_validated() {
        assert!(ScaleWeights::new(1, 2, vec![1.0, -1.0]).is_err());
        assert!(ScaleWeights::new(1, 2, vec![0.0, 0.0]).is_err());
        assert!(ScaleWeights::new(1, 2, vec![1.0]).is_err());
        assert!(ScaleWeights::new(1, 2, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn uniform_routing_gives_one() {
        // 4 experts, k = 2, each expert chosen by exactly half the tokens
        let rows = vec![
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.25, 0.25, 0.25, 0.25],
        ];
        let mut g = gate_from(&rows, 2);
        g.selected = vec![vec![0, 1], vec![2, 3]];
        let s = LoadBalanceStats::from_gate(&g, BalanceNorm::PerAssignment).unwrap();
        assert_eq!(load_balance_loss(&s, 4).unwrap(), 1.0);
    }

    #[test]
    fn collapse_approaches_n_routed() {
        let eps = 1e-9;
        let rows = vec![vec![1.0 - 2.0 * eps, eps, eps]; 5];
        let g = gate_from(&rows, 1);
        let s = LoadBalanceStats::from_gate(&g, BalanceNorm::PerAssignment).unwrap();
        let l = load_balance_loss(&s, 3).unwrap();
        assert!((l - 3.0).abs() < 1e-8, "{l}");
    }

    #[test]
    fn per_token_norm_scales_by_k() {
        let rows = vec![vec![0.5, 0.3, 0.2]; 4];
        let g = gate_from(&rows, 2);
        let a = LoadBalanceStats::from_gate(&g, BalanceNorm::PerAssignment).unwrap();
        let b = LoadBalanceStats::from_gate(&g, BalanceNorm::PerToken).unwrap();
        assert_eq!(a.f.iter().sum::<f64>(), 1.0);
        assert_eq!(b.f.iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn zero_tokens_is_an_error() {
        let s = LoadBalanceStats {
            f: vec![],
            p: vec![],
            tokens: 0,
        };
        assert!(load_balance_loss(&s, 0).is_err());
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(1.3, &[], BALANCE_COEF), 1.3);
        assert!((total_loss(2.0, &[1.0; 6], BALANCE_COEF) - 2.01).abs() < 1e-15);
        // mean of [1, 2, 3, 6] = 3
        assert!((total_loss(0.5, &[1.0, 2.0, 3.0, 6.0], 0.01) - 0.53).abs() < 1e-15);
    }

    #[test]
    fn recorded_losses_match_plain() {
        let rows = vec![vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3], vec![0.1, 0.1, 0.8]];
        let g = gate_from(&rows, 1);
        let mut t = Tape::new();
        let s = t.constant(g.scores.clone());
        let (lb, st) = load_balance_loss_var(&mut t, s, &g, BalanceNorm::PerAssignment).unwrap();
        let plain = load_balance_loss(&st, 3).unwrap();
        assert!((t.value(lb).item() - plain).abs() < 1e-15);

        let w = ScaleWeights::new(1, 3, vec![1.0, 1.5, 2.0]).unwrap();
        let nll: Vec<Var> = [0.3, 0.4, 0.9].iter().map(|&v| t.constant(Tensor::scalar(v))).collect();
        let lm = matryoshka_lm_loss_var(&mut t, &nll, &w).unwrap();
        let plain = matryoshka_lm_loss(&[0.3, 0.4, 0.9], &w).unwrap();
        assert!((t.value(lm).item() - plain).abs() < 1e-15);
    }
}
