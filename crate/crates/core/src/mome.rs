//! The MoME layer: a linear router with top-k gating over `N_r` routed
//! bottleneck experts, plus `N_s` shared experts applied to every token.
//!
//! ```text
//! MoME(H) = Σ_{n ≤ N_s} E_n(H) + Σ_{n routed} g_n · E_n(H)
//! g_n     = s_n if s_n is among the K largest routed scores, else 0
//! s       = softmax(H · W_router)
//! ```
//!
//! Gates are the raw softmax scores of the selected experts; they are not
//! renormalized. Only selected experts are evaluated.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::params::{uniform, Graph, ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Where the MoME branch attaches inside a transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Placement {
    /// In parallel with the feed-forward block, fed the post-attention LN.
    FfnParallel,
    /// In parallel with self-attention, fed the layer's input LN.
    #[default]
    MhsaParallel,
    /// Residual bypass around the whole layer, fed the layer's input LN.
    LayerParallel,
}

impl Placement {
    pub const ALL: [Placement; 3] = [
        Placement::FfnParallel,
        Placement::MhsaParallel,
        Placement::LayerParallel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Placement::FfnParallel => "ffn-parallel",
            Placement::MhsaParallel => "mhsa-parallel",
            Placement::LayerParallel => "layer-parallel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Placement::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown placement `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct MomeConfig {
    pub n_routed: usize,
    pub n_shared: usize,
    pub top_k: usize,
    pub bottleneck: usize,
    pub placement: Placement,
    /// One router per layer for every scale; `false` gives each scale of
    /// the grid its own router.
    pub shared_router: bool,
}

impl Default for MomeConfig {
    fn default() -> Self {
        MomeConfig {
            n_routed: 8,
            n_shared: 1,
            top_k: 2,
            bottleneck: 16,
            placement: Placement::MhsaParallel,
            shared_router: true,
        }
    }
}

impl MomeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_routed + self.n_shared == 0 {
            return Err(Error::contract("MoME needs at least one expert"));
        }
        if self.top_k > self.n_routed {
            return Err(Error::contract(format!(
                "top_k {} exceeds {} routed experts",
                self.top_k, self.n_routed
            )));
        }
        if self.n_routed > 0 && self.top_k == 0 {
            return Err(Error::contract("top_k must be at least 1 with routed experts"));
        }
        if self.bottleneck == 0 {
            return Err(Error::contract("expert bottleneck must be at least 1"));
        }
        Ok(())
    }

    /// Routers resident per layer for a grid of `n_scales` cells.
    pub fn routers_per_layer(&self, n_scales: usize) -> usize {
        match (self.n_routed, self.shared_router) {
            (0, _) => 0,
            (_, true) => 1,
            (_, false) => n_scales.max(1),
        }
    }
}

/// Bottleneck expert `GELU(h · w_down) · w_up`, no biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Expert {
    pub w_down: ParamId,
    pub w_up: ParamId,
}

impl Expert {
    /// `w_down` uniform in `±1/sqrt(d_model)`, `w_up` zero, so a fresh
    /// expert outputs exactly zero.
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_model: usize,
        bottleneck: usize,
    ) -> Self {
        let bound = 1.0 / math::sqrt(d_model as f64);
        let w_down = store.add(
            format!("{prefix}.w_down"),
            ParamGroup::Adapter,
            uniform(rng, &[d_model, bottleneck], bound),
        );
        let w_up = store.add(
            format!("{prefix}.w_up"),
            ParamGroup::Adapter,
            Tensor::zeros(&[bottleneck, d_model]),
        );
        Expert { w_down, w_up }
    }
}

/// Per-token routing result.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    /// `T × N_r` softmax scores.
    pub scores: Tensor,
    /// `T × N_r`, zero except at the selected experts.
    pub gates: Tensor,
    /// Selected expert indices per token, highest score first.
    pub selected: Vec<Vec<usize>>,
}

impl GateOutput {
    pub fn tokens(&self) -> usize {
        self.selected.len()
    }

    pub fn n_experts(&self) -> usize {
        self.scores.cols()
    }

    /// Assignment count per expert.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_experts()];
        for sel in &self.selected {
            for &n in sel {
                c[n] += 1;
            }
        }
        c
    }
}

/// Per-token softmax over routed-expert logits `h · w`.
pub fn router_scores(tape: &mut Tape, h: Var, w: Var) -> Result<Var> {
    let logits = tape.matmul(h, w)?;
    tape.softmax_rows(logits)
}

/// Keeps the `k` largest scores of each row as gates; ties go to the lower
/// expert index.
pub fn topk_gate(scores: &Tensor, k: usize) -> Result<GateOutput> {
    if !scores.is_matrix() {
        return Err(Error::shape(
            "topk_gate",
            format!("expected T×N_r scores, got {:?}", scores.shape()),
        ));
    }
    let n = scores.cols();
    if k == 0 || k > n {
        return Err(Error::contract(format!(
            "top-k {k} out of range for {n} routed experts"
        )));
    }
    let t = scores.rows();
    let mut gates = Tensor::zeros(&[t, n]);
    let mut selected = Vec::with_capacity(t);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for r in 0..t {
        let row = scores.row(r);
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let sel: Vec<usize> = order[..k].to_vec();
        let grow = gates.row_mut(r);
        for &e in &sel {
            grow[e] = row[e];
        }
        selected.push(sel);
    }
    Ok(GateOutput {
        scores: scores.clone(),
        gates,
        selected,
    })
}

/// `GELU(h · w_down) · w_up`.
pub fn expert_forward(tape: &mut Tape, w_down: Var, w_up: Var, h: Var) -> Result<Var> {
    let z = tape.matmul(h, w_down)?;
    let a = tape.gelu(z);
    tape.matmul(a, w_up)
}

/// Experts and routers of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MomeLayer {
    pub shared: Vec<Expert>,
    pub routed: Vec<Expert>,
    /// One router (`d_model × N_r`) when shared, else one per grid cell.
    pub routers: Vec<ParamId>,
}

impl MomeLayer {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: &MomeConfig,
        d_model: usize,
        n_scales: usize,
    ) -> Self {
        let shared = (0..cfg.n_shared)
            .map(|i| Expert::init(store, rng, &format!("{prefix}.shared.{i}"), d_model, cfg.bottleneck))
            .collect();
        let routed = (0..cfg.n_routed)
            .map(|i| Expert::init(store, rng, &format!("{prefix}.routed.{i}"), d_model, cfg.bottleneck))
            .collect();
        let bound = 1.0 / math::sqrt(d_model as f64);
        let routers = (0..cfg.routers_per_layer(n_scales))
            .map(|s| {
                store.add(
                    format!("{prefix}.router.{s}"),
                    ParamGroup::Adapter,
                    uniform(rng, &[d_model, cfg.n_routed], bound),
                )
            })
            .collect();
        MomeLayer {
            shared,
            routed,
            routers,
        }
    }

    /// Router consulted for grid cell `scale`.
    pub fn router_for(&self, scale: usize) -> Result<Option<ParamId>> {
        match self.routers.len() {
            0 => Ok(None),
            1 => Ok(Some(self.routers[0])),
            n if scale < n => Ok(Some(self.routers[scale])),
            n => Err(Error::contract(format!(
                "scale {scale} has no router ({n} disjoint routers)"
            ))),
        }
    }
}

/// Routing trace kept for the balance loss and analysis.
#[derive(Debug, Clone)]
pub struct Routing {
    pub gate: GateOutput,
    /// Recorded softmax scores, so the balance loss can reach the router.
    pub scores: Var,
}

#[derive(Debug, Clone)]
pub struct MomeOutput {
    pub out: Var,
    pub routing: Option<Routing>,
}

/// Applies one MoME module to `h` (`T × d_model`) for grid cell `scale`.
pub fn mome_forward(
    g: &mut Graph<'_>,
    h: Var,
    layer: &MomeLayer,
    cfg: &MomeConfig,
    scale: usize,
) -> Result<MomeOutput> {
    if layer.shared.len() != cfg.n_shared || layer.routed.len() != cfg.n_routed {
        return Err(Error::contract(format!(
            "layer has {}+{} experts, config wants {}+{}",
            layer.shared.len(),
            layer.routed.len(),
            cfg.n_shared,
            cfg.n_routed
        )));
    }
    let (t, d) = {
        let v = g.tape.value(h);
        (v.rows(), v.cols())
    };
    let mut acc: Option<Var> = None;
    let add = |g: &mut Graph<'_>, acc: &mut Option<Var>, x: Var| -> Result<()> {
        *acc = Some(match *acc {
            Some(a) => g.tape.add(a, x)?,
            None => x,
        });
        Ok(())
    };

    for e in &layer.shared {
        let (wd, wu) = (g.param(e.w_down), g.param(e.w_up));
        let y = expert_forward(&mut g.tape, wd, wu, h)?;
        add(g, &mut acc, y)?;
    }

    let mut routing = None;
    if cfg.n_routed > 0 {
        let router = layer
            .router_for(scale)?
            .ok_or_else(|| Error::contract("routed experts without a router"))?;
        let w = g.param(router);
        let scores = router_scores(&mut g.tape, h, w)?;
        let gate = topk_gate(g.tape.value(scores), cfg.top_k)?;
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_routed];
        for (tok, sel) in gate.selected.iter().enumerate() {
            for &n in sel {
                members[n].push(tok);
            }
        }
        for (n, idx) in members.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let e = layer.routed[n];
            let (wd, wu) = (g.param(e.w_down), g.param(e.w_up));
            let hn = g.tape.gather_rows(h, idx)?;
            let y = expert_forward(&mut g.tape, wd, wu, hn)?;
            let entries: Vec<(usize, usize)> = idx.iter().map(|&tok| (tok, n)).collect();
            let gn = g.tape.gather_entries(scores, &entries)?;
            let weighted = g.tape.mul_col(y, gn)?;
            let placed = g.tape.scatter_rows(weighted, idx, t)?;
            add(g, &mut acc, placed)?;
        }
        routing = Some(Routing { gate, scores });
    }

    let out = match acc {
        Some(v) => v,
        None => g.tape.constant(Tensor::zeros(&[t, d])),
    };
    Ok(MomeOutput { out, routing })
}

/// Adapter parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamCount {
    /// Parameters touched per token: router plus `N_s + K` experts.
    pub active: usize,
    /// Parameters held in memory with a single shared router per layer.
    pub resident: usize,
}

/// Per-token active and resident adapter parameters.
pub fn active_param_count(cfg: &MomeConfig, d_model: usize, n_layers: usize) -> ParamCount {
    let router = d_model * cfg.n_routed;
    let expert = 2 * d_model * cfg.bottleneck;
    ParamCount {
        active: n_layers * (router + (cfg.n_shared + cfg.top_k) * expert),
        resident: n_layers * (router + (cfg.n_shared + cfg.n_routed) * expert),
    }
}

/// Resident adapter parameters when each of `n_scales` grid cells may own
/// a router.
pub fn resident_param_count(cfg: &MomeConfig, d_model: usize, n_layers: usize, n_scales: usize) -> usize {
    let router = d_model * cfg.n_routed * cfg.routers_per_layer(n_scales);
    let expert = 2 * d_model * cfg.bottleneck;
    n_layers * (router + (cfg.n_shared + cfg.n_routed) * expert)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Trainable;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn topk_definitional_case() {
        let s = Tensor::from_rows(&[vec![0.5, 0.3, 0.15, 0.05]]).unwrap();
        let g = topk_gate(&s, 2).unwrap();
        assert_eq!(g.gates.data(), &[0.5, 0.3, 0.0, 0.0]);
        assert_eq!(g.selected, vec![vec![0, 1]]);
        let full = topk_gate(&s, 4).unwrap();
        assert_eq!(full.gates, s);
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let s = Tensor::from_rows(&[vec![0.4, 0.4, 0.2], vec![0.2, 0.4, 0.4]]).unwrap();
        let g = topk_gate(&s, 1).unwrap();
        assert_eq!(g.selected, vec![vec![0], vec![1]]);
    }

    #[test]
    fn topk_range_checked() {
        let s = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!(matches!(topk_gate(&s, 0), Err(Error::Contract(_))));
        assert!(matches!(topk_gate(&s, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_router_gives_uniform_scores() {
        let mut t = Tape::new();
        let h = t.constant(Tensor::full(&[3, 4], 0.7));
        let w = t.constant(Tensor::zeros(&[4, 5]));
        let s = router_scores(&mut t, h, w).unwrap();
        assert!(t.value(s).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let w1 = t.constant(Tensor::full(&[4, 1], 3.0));
        let s1 = router_scores(&mut t, h, w1).unwrap();
        assert!(t.value(s1).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn fresh_expert_outputs_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = Expert::init(&mut store, &mut rng, "e", 6, 3);
        let mut g = Graph::new(&store, Trainable::NONE);
        let h = g.tape.constant(uniform(&mut rng, &[4, 6], 2.0));
        let (wd, wu) = (g.param(e.w_down), g.param(e.w_up));
        let y = expert_forward(&mut g.tape, wd, wu, h).unwrap();
        assert!(g.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        let mut c = MomeConfig::default();
        assert!(c.validate().is_ok());
        c.top_k = 9;
        assert!(c.validate().is_err());
        c = MomeConfig {
            n_routed: 0,
            top_k: 0,
            ..MomeConfig::default()
        };
        assert!(c.validate().is_ok());
        c.n_shared = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn param_counts() {
        let router_only = MomeConfig {
            n_routed: 4,
            n_shared: 0,
            top_k: 0,
            ..MomeConfig::default()
        };
        assert_eq!(active_param_count(&router_only, 10, 3).active, 3 * 10 * 4);
        let a = MomeConfig {
            n_routed: 23,
            top_k: 4,
            n_shared: 1,
            bottleneck: 12,
            ..MomeConfig::default()
        };
        let b = MomeConfig { bottleneck: 1, ..a.clone() };
        let router = 2 * 64 * 23;
        let ea = active_param_count(&a, 64, 2).active - router;
        let eb = active_param_count(&b, 64, 2).active - router;
        assert_eq!(ea, 12 * eb);
        let dr = MomeConfig { shared_router: false, ..a.clone() };
        assert_eq!(
            resident_param_count(&dr, 64, 2, 4) - active_param_count(&dr, 64, 2).resident,
            2 * 3 * 64 * 23
        );
    }

    #[test]
    fn placement_names_round_trip() {
        for p in Placement::ALL {
            assert_eq!(Placement::parse(p.as_str()).unwrap(), p);
        }
        assert!(Placement::parse("attention").is_err());
    }
}
