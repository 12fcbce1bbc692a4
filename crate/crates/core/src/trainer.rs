//! Backbone pretraining, frozen-backbone adapter training and evaluation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Model;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::matryoshka::{build_entry, CompressionMode, MatryoshkaSequence, RatePair};
use crate::math;
use crate::objective::{
    load_balance_loss_var, BalanceNorm, LoadBalanceStats, LossReport, ScaleWeights, BALANCE_COEF,
};
use crate::params::{Graph, ParamGroup, ParamId, ParamStore, Trainable};
use crate::synthdata::Sample;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Phase {
    Pretrain,
    #[default]
    Adapters,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Keep a full loss report every this many steps (0: last step only).
    pub eval_every: usize,
    pub balance_coef: f64,
    pub balance_norm: BalanceNorm,
    pub max_grad_norm: Option<f64>,
    pub betas: [f64; 2],
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::Adapters,
            epochs: 10,
            batch_size: 4,
            lr_max: 1e-3,
            lr_min: 0.0,
            weight_decay: 0.1,
            warmup_steps: 0,
            seed: 0,
            eval_every: 50,
            balance_coef: BALANCE_COEF,
            balance_norm: BalanceNorm::default(),
            max_grad_norm: None,
            betas: [0.9, 0.999],
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch_size must be at least 1"));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::contract(format!(
                "need 0 <= lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        let [b1, b2] = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.eps > 0.0) {
            return Err(Error::contract("betas must lie in [0, 1) and eps must be positive"));
        }
        if !(self.weight_decay >= 0.0) || !(self.balance_coef >= 0.0) {
            return Err(Error::contract("weight_decay and balance_coef must be non-negative"));
        }
        if matches!(self.max_grad_norm, Some(m) if !(m > 0.0)) {
            return Err(Error::contract("max_grad_norm must be positive"));
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamW {
        AdamW {
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn total_steps(&self, n_samples: usize) -> usize {
        self.epochs * n_samples.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Moment buffers for the trainable parameters only.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub slots: BTreeMap<ParamId, Moments>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, trainable: Trainable) -> Self {
        let slots = store
            .iter()
            .filter(|(_, p)| trainable.contains(p.group))
            .map(|(id, p)| {
                let n = p.value.len();
                (id, Moments { m: vec![0.0; n], v: vec![0.0; n] })
            })
            .collect();
        OptimizerState { step: 0, slots }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots.keys().copied()
    }

    fn zero_grads(&self, store: &ParamStore) -> BTreeMap<ParamId, Tensor> {
        self.params()
            .map(|id| (id, Tensor::zeros(store.value(id).shape())))
            .collect()
    }
}

/// One AdamW update with decoupled weight decay. `grads` must cover every
/// parameter held in `state`.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &BTreeMap<ParamId, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    hp: &AdamW,
) -> Result<()> {
    for (id, g) in grads {
        if !state.slots.contains_key(id) {
            return Err(Error::contract(format!(
                "gradient supplied for untracked parameter {}",
                store.get(*id).name
            )));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient in {}",
                store.get(*id).name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let [b1, b2] = hp.betas;
    let c1 = 1.0 - math::powi(b1, t);
    let c2 = 1.0 - math::powi(b2, t);
    for (id, slot) in state.slots.iter_mut() {
        let g = grads.get(id).ok_or_else(|| {
            Error::contract(format!("missing gradient for {}", store.get(*id).name))
        })?;
        let w = store.value_mut(*id);
        if g.shape() != w.shape() {
            return Err(Error::shape("adamw_step", format!("gradient {:?} for {:?}", g.shape(), w.shape())));
        }
        for (((p, &gi), m), v) in w
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(slot.m.iter_mut())
            .zip(slot.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * gi;
            *v = b2 * *v + (1.0 - b2) * gi * gi;
            let upd = (*m / c1) / (math::sqrt(*v / c2) + hp.eps);
            *p -= lr * (upd + hp.weight_decay * *p);
        }
    }
    Ok(())
}

/// Linear warmup to `lr_max`, then cosine decay to `lr_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64, warmup: usize) -> f64 {
    let step = step.min(total);
    if step < warmup {
        return lr_max * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr_max;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math::cos(core::f64::consts::PI * progress))
}

/// Rescales `grads` in place to global L2 norm `max`; returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<ParamId, Tensor>, max: f64) -> f64 {
    let norm = math::sqrt(
        grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>(),
    );
    if norm > max {
        let k = max / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Per-step losses; `reports` holds the full breakdown every `eval_every` steps.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub reports: Vec<(usize, LossReport)>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub per_scale_nll: Vec<f64>,
}

impl TrainLog {
    pub fn final_report(&self) -> Option<&LossReport> {
        self.reports.last().map(|(_, r)| r)
    }
}

struct ItemOut {
    grads: Vec<(ParamId, Tensor)>,
    nll: f64,
    /// Per routed layer: balance loss and statistics.
    balance: Vec<(f64, LoadBalanceStats)>,
}

struct ItemLoss {
    route: Option<usize>,
    nll_weight: f64,
    balance_weight: f64,
    norm: BalanceNorm,
}

fn run_item(model: &Model, entry: &MatryoshkaSequence, trainable: Trainable, l: &ItemLoss) -> Result<ItemOut> {
    let mut g = Graph::new(&model.store, trainable);
    let (nll, out) = model.target_nll(&mut g, entry, l.route)?;
    let mut loss = g.tape.scale(nll, l.nll_weight);
    let mut balance = Vec::new();
    for r in out.routing.iter().flatten() {
        let (lb, stats) = load_balance_loss_var(&mut g.tape, r.scores, &r.gate, l.norm)?;
        if l.balance_weight != 0.0 {
            let term = g.tape.scale(lb, l.balance_weight);
            loss = g.tape.add(loss, term)?;
        }
        balance.push((g.tape.value(lb).item(), stats));
    }
    g.tape.backward(loss)?;
    Ok(ItemOut {
        grads: g.param_grads(),
        nll: g.tape.value(nll).item(),
        balance,
    })
}

/// Element-wise mean of statistics over samples.
fn mean_stats(all: &[LoadBalanceStats]) -> LoadBalanceStats {
    let n = all.len() as f64;
    let k = all[0].f.len();
    let mut f = vec![0.0; k];
    let mut p = vec![0.0; k];
    let mut tokens = 0;
    for s in all {
        for i in 0..k {
            f[i] += s.f[i] / n;
            p[i] += s.p[i] / n;
        }
        tokens += s.tokens;
    }
    LoadBalanceStats { f, p, tokens }
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

struct Job {
    cfg: TrainConfig,
    trainable: Trainable,
    /// `(rates, route, nll weight)` per scale, row-major.
    scales: Vec<(RatePair, Option<usize>, f64)>,
    mode: CompressionMode,
    balance_weight: f64,
    weights: Option<ScaleWeights>,
}

fn run(model: &mut Model, job: &Job, data: &[Sample], exec: &impl Executor) -> Result<TrainLog> {
    job.cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let vocab = model.vocab();
    let prompt = vocab.prompt();
    let mut state = OptimizerState::new(&model.store, job.trainable);
    let hp = job.cfg.hyper();
    let total = job.cfg.total_steps(data.len());
    let frozen_before = model.store.group_hash(ParamGroup::Backbone);
    let n_scales = job.scales.len();
    let mut log = TrainLog::default();
    let mut step = 0;

    for epoch in 0..job.cfg.epochs {
        let order = epoch_order(job.cfg.seed, epoch, data.len());
        for batch in order.chunks(job.cfg.batch_size) {
            let lr = cosine_lr(step, total, job.cfg.lr_max, job.cfg.lr_min, job.cfg.warmup_steps);
            let entries = batch
                .iter()
                .map(|&i| {
                    let s = &data[i];
                    let (a, v) = (s.audio_seq()?, s.video_seq()?);
                    let target = vocab.target(&s.target);
                    job.scales
                        .iter()
                        .map(|&(rates, _, _)| build_entry(&a, &v, &prompt, &target, rates, job.mode))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let m: &Model = model;
            let outs = exec.map(batch.len() * n_scales, |w| {
                let (b, sc) = (w / n_scales, w % n_scales);
                let (_, route, nll_weight) = job.scales[sc];
                let loss = ItemLoss {
                    route,
                    nll_weight,
                    balance_weight: job.balance_weight,
                    norm: job.cfg.balance_norm,
                };
                run_item(m, &entries[b][sc], job.trainable, &loss)
            });
            let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;

            let inv_b = 1.0 / batch.len() as f64;
            let mut grads = state.zero_grads(&model.store);
            for o in &outs {
                for (id, g) in &o.grads {
                    if let Some(acc) = grads.get_mut(id) {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += v * inv_b;
                        }
                    }
                }
            }

            let mut per_scale_nll = vec![0.0; n_scales];
            for (w, o) in outs.iter().enumerate() {
                per_scale_nll[w % n_scales] += o.nll * inv_b;
            }
            let lm_loss = match &job.weights {
                Some(wt) => crate::objective::matryoshka_lm_loss(&per_scale_nll, wt)?,
                None => per_scale_nll[0],
            };
            let n_layers_routed = outs[0].balance.len();
            let mut mean_balance = 0.0;
            let mut balance = vec![Vec::with_capacity(n_scales); n_layers_routed];
            for l in 0..n_layers_routed {
                for sc in 0..n_scales {
                    let items: Vec<&ItemOut> = outs.iter().skip(sc).step_by(n_scales).collect();
                    let stats: Vec<LoadBalanceStats> = items.iter().map(|o| o.balance[l].1.clone()).collect();
                    mean_balance += items.iter().map(|o| o.balance[l].0).sum::<f64>() * inv_b;
                    balance[l].push(mean_stats(&stats));
                }
            }
            if n_layers_routed > 0 {
                mean_balance /= (n_layers_routed * n_scales) as f64;
            }
            let total_loss = crate::objective::total_loss(
                lm_loss,
                if n_layers_routed > 0 { core::slice::from_ref(&mean_balance) } else { &[] },
                job.cfg.balance_coef,
            );
            if !total_loss.is_finite() {
                return Err(Error::Numeric(format!("loss diverged at step {step} (value {total_loss})")));
            }

            if let Some(max) = job.cfg.max_grad_norm {
                clip_grad_norm(&mut grads, max);
            }
            adamw_step(&mut model.store, &grads, &mut state, lr, &hp)?;

            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                total: total_loss,
                per_scale_nll: per_scale_nll.clone(),
            });
            step += 1;
            if (job.cfg.eval_every > 0 && step % job.cfg.eval_every == 0) || step == total {
                log.reports.push((
                    step,
                    LossReport {
                        per_scale_nll,
                        lm_loss,
                        mean_balance_loss: mean_balance,
                        total: total_loss,
                        balance,
                    },
                ));
            }
        }
        if job.trainable == Trainable::ADAPTERS && model.store.group_hash(ParamGroup::Backbone) != frozen_before {
            return Err(Error::contract(format!(
                "frozen backbone weights changed during epoch {epoch}"
            )));
        }
    }
    Ok(log)
}

/// Trains backbone and rate-1 projectors on uncompressed sequences.
pub fn pretrain(model: &mut Model, cfg: &TrainConfig, data: &[Sample], exec: &impl Executor) -> Result<TrainLog> {
    if cfg.phase != Phase::Pretrain {
        return Err(Error::contract("pretrain needs phase = pretrain"));
    }
    let job = Job {
        cfg: cfg.clone(),
        trainable: Trainable::PRETRAIN,
        scales: vec![(RatePair::UNCOMPRESSED, None, 1.0)],
        mode: CompressionMode::Avg,
        balance_weight: 0.0,
        weights: None,
    };
    run(model, &job, data, exec)
}

/// Trains projectors and MoME modules over every grid cell of each
/// sample, with the backbone frozen.
pub fn train_adapters(
    model: &mut Model,
    cfg: &TrainConfig,
    weights: &ScaleWeights,
    data: &[Sample],
    exec: &impl Executor,
) -> Result<TrainLog> {
    if cfg.phase != Phase::Adapters {
        return Err(Error::contract("train_adapters needs phase = adapters"));
    }
    let spec = model
        .adapters()
        .ok_or_else(|| Error::contract("model has no adapters attached"))?
        .spec
        .clone();
    let dims = (spec.grid.audio_rates().len(), spec.grid.video_rates().len());
    if weights.dims() != dims {
        return Err(Error::shape(
            "train_adapters",
            format!("scale weights {:?} for grid {:?}", weights.dims(), dims),
        ));
    }
    let g_l = spec.grid.len() as f64;
    let routed_layers = if spec.mome.n_routed > 0 { model.cfg.n_layers } else { 0 };
    let balance_weight = if routed_layers > 0 {
        cfg.balance_coef / (routed_layers as f64 * g_l)
    } else {
        0.0
    };
    let scales = spec
        .grid
        .pairs()
        .into_iter()
        .zip(weights.values())
        .enumerate()
        .map(|(i, (p, &c))| (p, Some(i), c / g_l))
        .collect();
    let job = Job {
        cfg: cfg.clone(),
        trainable: Trainable::ADAPTERS,
        scales,
        mode: spec.mode,
        balance_weight,
        weights: Some(weights.clone()),
    };
    run(model, &job, data, exec)
}

/// Edit distance with unit insert, delete and substitute costs.
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Beam { width: usize, temperature: f64 },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalMetrics {
    pub rates: RatePair,
    /// Rates outside the trained grid (served by the nearest router).
    pub out_of_grid: bool,
    pub samples: usize,
    /// Corpus edit distance over total reference length.
    pub symbol_error_rate: f64,
    /// Teacher-forced argmax accuracy over target tokens (with the end token).
    pub token_accuracy: f64,
    /// Teacher-forced mean NLL per target token.
    pub mean_nll: f64,
}

struct SampleEval {
    edits: usize,
    ref_len: usize,
    correct: usize,
    tokens: usize,
    nll_sum: f64,
}

fn eval_sample(model: &Model, s: &Sample, rates: RatePair, decoding: Decoding) -> Result<SampleEval> {
    let vocab = model.vocab();
    let route = model.route_for(rates);
    let prefix = model.prefix(&s.audio_seq()?, &s.video_seq()?, rates)?;
    let max_len = model.cfg.max_text_len.saturating_sub(prefix.prompt.len() - 1);
    let hyp = match decoding {
        Decoding::Greedy => model.greedy_decode(&prefix, max_len, route)?,
        Decoding::Beam { width, temperature } => model.beam_decode(&prefix, width, temperature, max_len, route)?,
    };
    let entry = prefix.with_target(vocab.target(&s.target));
    let mut g = Graph::new(&model.store, Trainable::NONE);
    let (nll, out) = model.target_nll(&mut g, &entry, route)?;
    let logits = g.tape.value(out.logits);
    let t = entry.segments.target.clone();
    let correct = (t.start..t.end)
        .zip(&entry.target)
        .filter(|&(pos, &y)| argmax(logits.row(pos - 1)) == y)
        .count();
    Ok(SampleEval {
        edits: levenshtein(&hyp, &s.target),
        ref_len: s.target.len(),
        correct,
        tokens: entry.target.len(),
        nll_sum: g.tape.value(nll).item() * entry.target.len() as f64,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Decodes every sample at `rates` and scores the transcripts.
pub fn evaluate(
    model: &Model,
    data: &[Sample],
    rates: RatePair,
    decoding: Decoding,
    exec: &impl Executor,
) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    let out_of_grid = match model.adapters() {
        Some(ad) => !ad.spec.grid.contains(rates),
        None => rates != RatePair::UNCOMPRESSED,
    };
    let per = exec
        .map(data.len(), |i| eval_sample(model, &data[i], rates, decoding))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let sum = |f: fn(&SampleEval) -> usize| per.iter().map(f).sum::<usize>();
    let (edits, ref_len, correct, tokens) = (
        sum(|e| e.edits),
        sum(|e| e.ref_len),
        sum(|e| e.correct),
        sum(|e| e.tokens),
    );
    Ok(EvalMetrics {
        rates,
        out_of_grid,
        samples: data.len(),
        symbol_error_rate: edits as f64 / ref_len.max(1) as f64,
        token_accuracy: correct as f64 / tokens as f64,
        mean_nll: per.iter().map(|e| e.nll_sum).sum::<f64>() / tokens as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_landmarks() {
        let (hi, lo) = (1e-3, 1e-5);
        assert_eq!(cosine_lr(10, 110, hi, lo, 10), hi);
        assert!((cosine_lr(110, 110, hi, lo, 10) - lo).abs() < 1e-18);
        assert!((cosine_lr(60, 110, hi, lo, 10) - (hi + lo) / 2.0).abs() < 1e-12);
        assert_eq!(cosine_lr(5, 110, hi, lo, 10), hi / 2.0);
    }

    #[test]
    fn levenshtein_cases() {
        assert_eq!(levenshtein(&[0, 1, 2], &[0, 9, 2]), 1);
        assert_eq!(levenshtein(&[], &[1, 2, 3]), 3);
        assert_eq!(levenshtein(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(levenshtein(&[1, 2], &[2, 1, 2, 3]), 2);
    }

    fn scalar_store(x: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", ParamGroup::Adapter, Tensor::vector(vec![x]));
        (s, id)
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let (mut s, id) = scalar_store(0.7);
        let mut st = OptimizerState::new(&s, Trainable::ADAPTERS);
        let g = BTreeMap::from([(id, Tensor::vector(vec![0.0]))]);
        adamw_step(&mut s, &g, &mut st, 0.1, &AdamW::default()).unwrap();
        assert_eq!(s.value(id).data(), &[0.7]);
    }

    #[test]
    fn decay_shrinks_geometrically() {
        let (mut s, id) = scalar_store(2.0);
        let mut st = OptimizerState::new(&s, Trainable::ADAPTERS);
        let hp = AdamW { weight_decay: 0.1, ..AdamW::default() };
        let g = BTreeMap::from([(id, Tensor::vector(vec![0.0]))]);
        for _ in 0..3 {
            adamw_step(&mut s, &g, &mut st, 0.5, &hp).unwrap();
        }
        let want = 2.0 * (1.0f64 - 0.05).powi(3);
        assert!((s.value(id).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut s, id) = scalar_store(1.0);
        let mut st = OptimizerState::new(&s, Trainable::ADAPTERS);
        let g = BTreeMap::from([(id, Tensor::vector(vec![f64::NAN]))]);
        match adamw_step(&mut s, &g, &mut st, 0.1, &AdamW::default()) {
            Err(Error::Numeric(msg)) => assert!(msg.contains('x')),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn state_only_for_trainable() {
        let mut s = ParamStore::new();
        s.add("bb", ParamGroup::Backbone, Tensor::vector(vec![1.0]));
        s.add("ad", ParamGroup::Adapter, Tensor::vector(vec![1.0]));
        let st = OptimizerState::new(&s, Trainable::ADAPTERS);
        assert_eq!(st.params().collect::<Vec<_>>(), vec![ParamId(1)]);
    }
}
