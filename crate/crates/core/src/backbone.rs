//! Small pre-LN decoder-only transformer with modality projectors and
//! optional MoME branches at one of three placements.
//!
//! Input layout is `audio ∥ video ∥ prompt ∥ target`. AV tokens are the
//! projected stream features; text tokens come from the embedding table.
//! Each segment has its own learned absolute position table: AV tokens are
//! indexed by the first source frame they cover, text tokens by their
//! offset in the text segment.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matryoshka::{
    build_entry, CompressionMode, MatryoshkaSequence, Modality, RateGrid, RatePair, Segments,
    TokenSequence,
};
use crate::math;
use crate::mome::{mome_forward, MomeConfig, MomeLayer, Placement, Routing};
use crate::params::{normal, uniform, Graph, ParamGroup, ParamId, ParamStore, Trainable};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Text vocabulary: transcription symbols followed by three specials.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub n_symbols: usize,
}

impl Vocab {
    pub fn new(n_symbols: usize) -> Self {
        Vocab { n_symbols }
    }
    pub fn bos(&self) -> usize {
        self.n_symbols
    }
    pub fn eos(&self) -> usize {
        self.n_symbols + 1
    }
    /// "transcribe speech and video" task marker.
    pub fn task(&self) -> usize {
        self.n_symbols + 2
    }
    pub fn size(&self) -> usize {
        self.n_symbols + 3
    }
    pub fn prompt(&self) -> Vec<usize> {
        vec![self.task(), self.bos()]
    }
    /// Symbols followed by end-of-sequence.
    pub fn target(&self, symbols: &[usize]) -> Vec<usize> {
        let mut t = symbols.to_vec();
        t.push(self.eos());
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    /// Hidden width of the modality projectors.
    pub projector_hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub audio_dim: usize,
    pub video_dim: usize,
    /// Size of the audio position table (source frames).
    pub max_audio_frames: usize,
    pub max_video_frames: usize,
    pub max_text_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            ffn_hidden: 64,
            projector_hidden: 128,
            vocab_size: 35,
            max_seq_len: 640,
            audio_dim: 32,
            video_dim: 32,
            max_audio_frames: 384,
            max_video_frames: 120,
            max_text_len: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model < 2 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} must be at least 2 and divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("ffn_hidden", self.ffn_hidden),
            ("projector_hidden", self.projector_hidden),
            ("vocab_size", self.vocab_size),
            ("audio_dim", self.audio_dim),
            ("video_dim", self.video_dim),
            ("max_audio_frames", self.max_audio_frames),
            ("max_video_frames", self.max_video_frames),
            ("max_text_len", self.max_text_len),
        ] {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        if self.max_seq_len < self.max_audio_frames + self.max_video_frames + self.max_text_len {
            return Err(Error::contract(format!(
                "max_seq_len {} is shorter than the longest uncompressed sequence {}",
                self.max_seq_len,
                self.max_audio_frames + self.max_video_frames + self.max_text_len
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Audio => self.audio_dim,
            Modality::Video => self.video_dim,
            Modality::Text => self.d_model,
        }
    }
}

/// Linear → ReLU → linear, from feature width through `projector_hidden` to `d_model`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Projector {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Projector {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d_in: usize, hidden: usize, d_model: usize) -> Self {
        let b_in = 1.0 / math::sqrt(d_in as f64);
        let b_mid = 1.0 / math::sqrt(hidden as f64);
        Projector {
            w1: store.add(format!("{prefix}.w1"), ParamGroup::Projector, uniform(rng, &[d_in, hidden], b_in)),
            b1: store.add(format!("{prefix}.b1"), ParamGroup::Projector, uniform(rng, &[hidden], b_in)),
            w2: store.add(format!("{prefix}.w2"), ParamGroup::Projector, uniform(rng, &[hidden, d_model], b_mid)),
            b2: store.add(format!("{prefix}.b2"), ParamGroup::Projector, uniform(rng, &[d_model], b_mid)),
        }
    }

    pub fn input_width(&self, store: &ParamStore) -> usize {
        store.value(self.w1).shape()[0]
    }
}

/// Applies a projector to `tokens` (`T × d_in`).
pub fn projector_forward(g: &mut Graph<'_>, p: &Projector, tokens: Var) -> Result<Var> {
    let want = p.input_width(g.store());
    let got = g.tape.value(tokens).cols();
    if want != got {
        return Err(Error::contract(format!(
            "projector expects width {want}, tokens have width {got}"
        )));
    }
    let (w1, b1, w2, b2) = (g.param(p.w1), g.param(p.b1), g.param(p.w2), g.param(p.b2));
    let h = g.tape.matmul(tokens, w1)?;
    let h = g.tape.add_row(h, b1)?;
    let h = g.tape.relu(h);
    let o = g.tape.matmul(h, w2)?;
    g.tape.add_row(o, b2)
}

/// Parameters of one transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerParams {
    pub ln1: (ParamId, ParamId),
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2: (ParamId, ParamId),
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// MoME branch handed to [`layer_forward`].
#[derive(Debug, Clone, Copy)]
pub struct MomeBranch<'a> {
    pub layer: &'a MomeLayer,
    pub cfg: &'a MomeConfig,
    pub scale: usize,
}

fn layernorm(g: &mut Graph<'_>, x: Var, ln: (ParamId, ParamId)) -> Result<Var> {
    let (gain, bias) = (g.param(ln.0), g.param(ln.1));
    g.tape.layernorm(x, gain, bias)
}

fn attention(g: &mut Graph<'_>, u: Var, p: &LayerParams, heads: usize) -> Result<Var> {
    let (wq, wk, wv, wo) = (g.param(p.wq), g.param(p.wk), g.param(p.wv), g.param(p.wo));
    let q = g.tape.matmul(u, wq)?;
    let k = g.tape.matmul(u, wk)?;
    let v = g.tape.matmul(u, wv)?;
    let a = g.tape.causal_attention(q, k, v, heads)?;
    g.tape.matmul(a, wo)
}

fn ffn(g: &mut Graph<'_>, u: Var, p: &LayerParams) -> Result<Var> {
    let (w1, b1, w2, b2) = (g.param(p.w1), g.param(p.b1), g.param(p.w2), g.param(p.b2));
    let h = g.tape.matmul(u, w1)?;
    let h = g.tape.add_row(h, b1)?;
    let h = g.tape.gelu(h);
    let o = g.tape.matmul(h, w2)?;
    g.tape.add_row(o, b2)
}

/// One pre-LN layer with an optional MoME branch.
///
/// * ffn-parallel: `H = x + Attn(LN1 x)`, `out = H + FFN(LN2 H) + MoME(LN2 H)`
/// * mhsa-parallel: `H = x + Attn(LN1 x) + MoME(LN1 x)`, `out = H + FFN(LN2 H)`
/// * layer-parallel: `out = Layer(x) + MoME(LN1 x)`
///
/// The MoME term is always added last, so a zero branch reproduces the
/// frozen layer bit for bit.
pub fn layer_forward(
    g: &mut Graph<'_>,
    x: Var,
    p: &LayerParams,
    heads: usize,
    mome: Option<MomeBranch<'_>>,
) -> Result<(Var, Option<Routing>)> {
    let placement = mome.map(|m| m.cfg.placement);
    let mut routing = None;
    let branch = |g: &mut Graph<'_>, input: Var, routing: &mut Option<Routing>| -> Result<Option<Var>> {
        match mome {
            Some(m) => {
                let o = mome_forward(g, input, m.layer, m.cfg, m.scale)?;
                *routing = o.routing;
                Ok(Some(o.out))
            }
            None => Ok(None),
        }
    };

    let u1 = layernorm(g, x, p.ln1)?;
    let att = attention(g, u1, p, heads)?;
    let mut h = g.tape.add(x, att)?;
    if placement == Some(Placement::MhsaParallel) {
        if let Some(m) = branch(g, u1, &mut routing)? {
            h = g.tape.add(h, m)?;
        }
    }
    let u2 = layernorm(g, h, p.ln2)?;
    let f = ffn(g, u2, p)?;
    let mut out = g.tape.add(h, f)?;
    match placement {
        Some(Placement::FfnParallel) => {
            if let Some(m) = branch(g, u2, &mut routing)? {
                out = g.tape.add(out, m)?;
            }
        }
        Some(Placement::LayerParallel) => {
            if let Some(m) = branch(g, u1, &mut routing)? {
                out = g.tape.add(out, m)?;
            }
        }
        _ => {}
    }
    Ok((out, routing))
}

/// MoME configuration and the grid it is trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSpec {
    pub mome: MomeConfig,
    pub grid: RateGrid,
    pub mode: CompressionMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapters {
    pub spec: AdapterSpec,
    pub layers: Vec<MomeLayer>,
}

/// Output of a full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `T × V`.
    pub logits: Var,
    /// Per layer; `None` when the layer ran without routed experts.
    pub routing: Vec<Option<Routing>>,
    pub segments: Segments,
}

/// Split of parameters into the frozen backbone and the trainable rest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrozenPartition {
    pub frozen: Vec<String>,
    pub trainable: Vec<String>,
    pub frozen_hash: [u8; 32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    tok_emb: ParamId,
    pos_audio: ParamId,
    pos_video: ParamId,
    pos_text: ParamId,
    layers: Vec<LayerParams>,
    ln_f: (ParamId, ParamId),
    head: ParamId,
    projectors: BTreeMap<(Modality, usize), Projector>,
    adapters: Option<Adapters>,
}

impl Model {
    /// Fresh backbone with rate-1 projectors, deterministic in `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = cfg.d_model;
        let bd = 1.0 / math::sqrt(d as f64);
        let bf = 1.0 / math::sqrt(cfg.ffn_hidden as f64);
        let bb = ParamGroup::Backbone;

        let tok_emb = s.add("backbone.tok_emb", bb, normal(&mut rng, &[cfg.vocab_size, d], 1.0));
        let pos_audio = s.add("backbone.pos_audio", bb, normal(&mut rng, &[cfg.max_audio_frames, d], 0.02));
        let pos_video = s.add("backbone.pos_video", bb, normal(&mut rng, &[cfg.max_video_frames, d], 0.02));
        let pos_text = s.add("backbone.pos_text", bb, normal(&mut rng, &[cfg.max_text_len, d], 0.02));
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let pre = format!("backbone.layers.{l}");
            let ln = |s: &mut ParamStore, name: &str| {
                (
                    s.add(format!("{pre}.{name}.gain"), bb, Tensor::full(&[d], 1.0)),
                    s.add(format!("{pre}.{name}.bias"), bb, Tensor::zeros(&[d])),
                )
            };
            let ln1 = ln(&mut s, "ln1");
            let ln2 = ln(&mut s, "ln2");
            layers.push(LayerParams {
                ln1,
                wq: s.add(format!("{pre}.attn.wq"), bb, uniform(&mut rng, &[d, d], bd)),
                wk: s.add(format!("{pre}.attn.wk"), bb, uniform(&mut rng, &[d, d], bd)),
                wv: s.add(format!("{pre}.attn.wv"), bb, uniform(&mut rng, &[d, d], bd)),
                wo: s.add(format!("{pre}.attn.wo"), bb, uniform(&mut rng, &[d, d], bd)),
                ln2,
                w1: s.add(format!("{pre}.ffn.w1"), bb, uniform(&mut rng, &[d, cfg.ffn_hidden], bd)),
                b1: s.add(format!("{pre}.ffn.b1"), bb, uniform(&mut rng, &[cfg.ffn_hidden], bd)),
                w2: s.add(format!("{pre}.ffn.w2"), bb, uniform(&mut rng, &[cfg.ffn_hidden, d], bf)),
                b2: s.add(format!("{pre}.ffn.b2"), bb, uniform(&mut rng, &[d], bf)),
            });
        }
        let ln_f = (
            s.add("backbone.ln_f.gain", bb, Tensor::full(&[d], 1.0)),
            s.add("backbone.ln_f.bias", bb, Tensor::zeros(&[d])),
        );
        let head = s.add("backbone.head", bb, uniform(&mut rng, &[d, cfg.vocab_size], bd));

        let mut projectors = BTreeMap::new();
        projectors.insert(
            (Modality::Audio, 1),
            Projector::init(&mut s, &mut rng, "projector.audio.r1", cfg.audio_dim, cfg.projector_hidden, d),
        );
        projectors.insert(
            (Modality::Video, 1),
            Projector::init(&mut s, &mut rng, "projector.video.r1", cfg.video_dim, cfg.projector_hidden, d),
        );

        Ok(Model {
            cfg,
            store: s,
            tok_emb,
            pos_audio,
            pos_video,
            pos_text,
            layers,
            ln_f,
            head,
            projectors,
            adapters: None,
        })
    }

    /// Adds MoME modules (and per-rate projectors in stack mode).
    ///
    /// Stack projectors start from the rate-1 projector with its first
    /// weight tiled and divided by the rate, so `r` identical stacked
    /// tokens project exactly like one.
    pub fn attach_adapters(&mut self, spec: AdapterSpec, seed: u64) -> Result<()> {
        if self.adapters.is_some() {
            return Err(Error::contract("adapters already attached"));
        }
        spec.mome.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_6d65);
        let d = self.cfg.d_model;
        let n_scales = spec.grid.len();
        let layers = (0..self.cfg.n_layers)
            .map(|l| MomeLayer::init(&mut self.store, &mut rng, &format!("mome.layers.{l}"), &spec.mome, d, n_scales))
            .collect();
        if spec.mode == CompressionMode::Stack {
            for (m, rates) in [
                (Modality::Audio, spec.grid.audio_rates().to_vec()),
                (Modality::Video, spec.grid.video_rates().to_vec()),
            ] {
                for r in rates.into_iter().filter(|&r| r > 1) {
                    self.add_stack_projector(m, r)?;
                }
            }
        }
        self.adapters = Some(Adapters { spec, layers });
        Ok(())
    }

    fn add_stack_projector(&mut self, m: Modality, r: usize) -> Result<()> {
        let base = self.projectors[&(m, 1)];
        let d_in = self.cfg.feature_dim(m);
        let name = match m {
            Modality::Audio => "audio",
            Modality::Video => "video",
            Modality::Text => return Err(Error::contract("text has no projector")),
        };
        let prefix = format!("projector.{name}.r{r}");
        let w1 = self.store.value(base.w1).clone();
        let mut tiled = Vec::with_capacity(r * w1.len());
        for _ in 0..r {
            tiled.extend(w1.data().iter().map(|v| v / r as f64));
        }
        let grp = ParamGroup::Projector;
        let p = Projector {
            w1: self.store.add(format!("{prefix}.w1"), grp, Tensor::matrix(r * d_in, self.cfg.projector_hidden, tiled)?),
            b1: self.store.add(format!("{prefix}.b1"), grp, self.store.value(base.b1).clone()),
            w2: self.store.add(format!("{prefix}.w2"), grp, self.store.value(base.w2).clone()),
            b2: self.store.add(format!("{prefix}.b2"), grp, self.store.value(base.b2).clone()),
        };
        self.projectors.insert((m, r), p);
        Ok(())
    }

    pub fn adapters(&self) -> Option<&Adapters> {
        self.adapters.as_ref()
    }

    /// Drops the MoME modules and their parameters, keeping everything else.
    pub fn without_adapters(&self) -> Result<Model> {
        let mut m = Model::new(self.cfg.clone(), 0)?;
        for (_, p) in self.store.iter() {
            if p.group != ParamGroup::Adapter && m.store.find(&p.name).is_some() {
                m.store.assign(&p.name, p.value.clone())?;
            }
        }
        Ok(m)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.cfg.vocab_size.saturating_sub(3))
    }

    pub fn layer_params(&self) -> &[LayerParams] {
        &self.layers
    }

    /// Replaces every parameter by name; the set of names must match.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.store.len() {
            return Err(Error::contract(format!(
                "checkpoint holds {} tensors, model has {}",
                named.len(),
                self.store.len()
            )));
        }
        for (name, t) in named {
            self.store.assign(name, t.clone())?;
        }
        Ok(())
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect()
    }

    pub fn frozen_partition(&self) -> FrozenPartition {
        let mut trainable = self.store.names(ParamGroup::Projector);
        trainable.extend(self.store.names(ParamGroup::Adapter));
        FrozenPartition {
            frozen: self.store.names(ParamGroup::Backbone),
            trainable,
            frozen_hash: self.store.group_hash(ParamGroup::Backbone),
        }
    }

    fn projector_for(&self, m: Modality, width: usize) -> Result<&Projector> {
        let base = self.cfg.feature_dim(m);
        let r = if width % base == 0 { width / base } else { 0 };
        self.projectors.get(&(m, r)).ok_or_else(|| {
            Error::contract(format!("no {m:?} projector for feature width {width}"))
        })
    }

    /// Projected tokens of a stream, as fed to the first layer (before
    /// positional embeddings).
    pub fn project(&self, seq: &TokenSequence) -> Result<Tensor> {
        let mut g = Graph::new(&self.store, Trainable::NONE);
        let x = g.tape.constant(seq.tokens.clone());
        let p = self.projector_for(seq.modality, seq.width())?;
        let y = projector_forward(&mut g, p, x)?;
        Ok(g.tape.value(y).clone())
    }

    fn embed_stream(&self, g: &mut Graph<'_>, seq: &TokenSequence, table: ParamId, table_len: usize) -> Result<Var> {
        let starts: Vec<usize> = seq.frame_starts().collect();
        if let Some(&last) = starts.last() {
            if last >= table_len {
                return Err(Error::contract(format!(
                    "{:?} stream reaches frame {last}, position table holds {table_len}",
                    seq.modality
                )));
            }
        }
        let p = *self.projector_for(seq.modality, seq.width())?;
        let x = g.tape.constant(seq.tokens.clone());
        let y = projector_forward(g, &p, x)?;
        let tab = g.param(table);
        let pos = g.tape.gather_rows(tab, &starts)?;
        g.tape.add(y, pos)
    }

    fn embed(&self, g: &mut Graph<'_>, entry: &MatryoshkaSequence) -> Result<Var> {
        if entry.len() > self.cfg.max_seq_len {
            return Err(Error::contract(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                entry.len(),
                self.cfg.max_seq_len
            )));
        }
        let a = self.embed_stream(g, &entry.audio, self.pos_audio, self.cfg.max_audio_frames)?;
        let v = self.embed_stream(g, &entry.video, self.pos_video, self.cfg.max_video_frames)?;
        let ids = entry.text_ids();
        if ids.len() > self.cfg.max_text_len {
            return Err(Error::contract(format!(
                "text segment of {} tokens exceeds max_text_len {}",
                ids.len(),
                self.cfg.max_text_len
            )));
        }
        let mut parts = vec![a, v];
        if !ids.is_empty() {
            let emb = g.param(self.tok_emb);
            let e = g.tape.gather_rows(emb, &ids)?;
            let tab = g.param(self.pos_text);
            let positions: Vec<usize> = (0..ids.len()).collect();
            let p = g.tape.gather_rows(tab, &positions)?;
            parts.push(g.tape.add(e, p)?);
        }
        g.tape.concat_rows(&parts)
    }

    /// Full forward pass. With `route = Some(scale)` and adapters attached,
    /// every layer runs its MoME branch for grid cell `scale`; with `None`
    /// the bare backbone runs.
    pub fn forward(&self, g: &mut Graph<'_>, entry: &MatryoshkaSequence, route: Option<usize>) -> Result<ForwardOutput> {
        let mut x = self.embed(g, entry)?;
        let mut routing = Vec::with_capacity(self.layers.len());
        for (l, p) in self.layers.iter().enumerate() {
            let branch = match (route, &self.adapters) {
                (Some(scale), Some(ad)) => Some(MomeBranch {
                    layer: &ad.layers[l],
                    cfg: &ad.spec.mome,
                    scale,
                }),
                _ => None,
            };
            let (y, r) = layer_forward(g, x, p, self.cfg.n_heads, branch)?;
            x = y;
            routing.push(r);
        }
        let h = layernorm(g, x, self.ln_f)?;
        let w = g.param(self.head);
        let logits = g.tape.matmul(h, w)?;
        Ok(ForwardOutput {
            logits,
            routing,
            segments: entry.segments.clone(),
        })
    }

    /// Mean NLL of the target segment under teacher forcing.
    pub fn target_nll(&self, g: &mut Graph<'_>, entry: &MatryoshkaSequence, route: Option<usize>) -> Result<(Var, ForwardOutput)> {
        let out = self.forward(g, entry, route)?;
        let t = entry.segments.target.clone();
        if t.is_empty() || t.start == 0 {
            return Err(Error::contract("entry has no target segment to score"));
        }
        let rows = g.tape.slice_rows(out.logits, t.start - 1, t.end - 1)?;
        let nll = g.tape.cross_entropy(rows, &entry.target)?;
        Ok((nll, out))
    }

    /// Grid cell whose router serves `rates`: its own cell when in the
    /// grid, else the nearest one.
    pub fn route_for(&self, rates: RatePair) -> Option<usize> {
        self.adapters.as_ref().map(|ad| {
            ad.spec
                .grid
                .position(rates)
                .unwrap_or_else(|| ad.spec.grid.nearest(rates))
        })
    }

    /// Assembles an inference prefix (no target) at `rates`.
    pub fn prefix(&self, audio: &TokenSequence, video: &TokenSequence, rates: RatePair) -> Result<MatryoshkaSequence> {
        let mode = self
            .adapters
            .as_ref()
            .map_or(CompressionMode::Avg, |a| a.spec.mode);
        build_entry(audio, video, &self.vocab().prompt(), &[], rates, mode)
    }

    /// Logits for the token after `prefix ∥ generated`.
    pub fn next_logits(&self, prefix: &MatryoshkaSequence, generated: &[usize], route: Option<usize>) -> Result<Vec<f64>> {
        let entry = prefix.with_target(generated.to_vec());
        let mut g = Graph::new(&self.store, Trainable::NONE);
        let out = self.forward(&mut g, &entry, route)?;
        let last = entry.len() - 1;
        Ok(g.tape.value(out.logits).row(last).to_vec())
    }

    pub fn greedy_decode(&self, prefix: &MatryoshkaSequence, max_len: usize, route: Option<usize>) -> Result<Vec<usize>> {
        let eos = self.vocab().eos();
        Ok(greedy_search(|gen: &[usize]| self.next_logits(prefix, gen, route), eos, max_len)?.tokens)
    }

    pub fn beam_decode(
        &self,
        prefix: &MatryoshkaSequence,
        beam_width: usize,
        temperature: f64,
        max_len: usize,
        route: Option<usize>,
    ) -> Result<Vec<usize>> {
        let eos = self.vocab().eos();
        Ok(beam_search(
            |gen: &[usize]| self.next_logits(prefix, gen, route),
            eos,
            beam_width,
            temperature,
            max_len,
        )?
        .tokens)
    }
}

/// Decoded sequence (without the end token) and its total log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    let mx = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + math::ln(scaled.iter().map(|v| math::exp(v - mx)).sum::<f64>());
    scaled.into_iter().map(|v| v - lse).collect()
}

/// Beam search over `step(generated) -> next-token logits`.
///
/// Scores are summed log-probabilities of `softmax(logits / temperature)`
/// with no length penalty. Finished beams compete with live ones. Ties go
/// to the earlier beam, then the lower token id.
pub fn beam_search<F>(mut step: F, eos: usize, beam_width: usize, temperature: f64, max_len: usize) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if beam_width == 0 {
        return Err(Error::contract("beam width must be at least 1"));
    }
    if !(temperature > 0.0) {
        return Err(Error::contract("temperature must be positive"));
    }
    let mut beams = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    for _ in 0..max_len {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        // (score, beam, token or None for a carried finished beam)
        let mut cands: Vec<(f64, usize, Option<usize>)> = Vec::new();
        for (bi, b) in beams.iter().enumerate() {
            if b.finished {
                cands.push((b.log_prob, bi, None));
                continue;
            }
            let lp = log_softmax(&step(&b.tokens)?, temperature);
            cands.extend(lp.iter().enumerate().map(|(tok, &l)| (b.log_prob + l, bi, Some(tok))));
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        cands.truncate(beam_width);
        beams = cands
            .into_iter()
            .map(|(score, bi, tok)| {
                let mut h = beams[bi].clone();
                h.log_prob = score;
                if let Some(t) = tok {
                    if t == eos {
                        h.finished = true;
                    } else {
                        h.tokens.push(t);
                    }
                }
                h
            })
            .collect();
    }
    Ok(beams.into_iter().next().expect("beam_width >= 1"))
}

/// Beam width 1 at temperature 1.
pub fn greedy_search<F>(step: F, eos: usize, max_len: usize) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    beam_search(step, eos, 1, 1.0, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_hidden: 16,
            projector_hidden: 16,
            vocab_size: 7,
            max_seq_len: 64,
            audio_dim: 3,
            video_dim: 2,
            max_audio_frames: 32,
            max_video_frames: 16,
            max_text_len: 16,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { n_heads: 3, ..tiny() };
        assert!(bad.validate().is_err());
        let short = ModelConfig { max_seq_len: 10, ..tiny() };
        assert!(short.validate().is_err());
    }

    #[test]
    fn projector_zero_and_identity() {
        let m = Model::new(tiny(), 3).unwrap();
        let p = m.projectors[&(Modality::Audio, 1)];
        let mut store = m.store.clone();
        for id in [p.b1, p.b2] {
            for v in store.value_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let mut g = Graph::new(&store, Trainable::NONE);
        let x = g.tape.constant(Tensor::zeros(&[4, 3]));
        let y = projector_forward(&mut g, &p, x).unwrap();
        assert!(g.tape.value(y).data().iter().all(|&v| v == 0.0));
        let bad = g.tape.constant(Tensor::zeros(&[4, 5]));
        assert!(projector_forward(&mut g, &p, bad).is_err());
    }

    #[test]
    fn vocab_layout() {
        let v = Vocab::new(32);
        assert_eq!((v.bos(), v.eos(), v.task(), v.size()), (32, 33, 34, 35));
        assert_eq!(v.target(&[3, 4]), vec![3, 4, 33]);
    }

    #[test]
    fn beam_one_equals_greedy_on_fixed_table() {
        // next-token logits depend only on the step number
        let table = [
            vec![0.1, 2.0, 0.3, -1.0],
            vec![1.5, 0.2, 0.1, 0.0],
            vec![0.0, 0.0, 0.0, 3.0],
        ];
        let step = |g: &[usize]| Ok(table[g.len().min(2)].clone());
        let a = greedy_search(step, 3, 10).unwrap();
        let b = beam_search(step, 3, 1, 1.0, 10).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens, vec![1, 0]);
        assert!(a.finished);
    }

    #[test]
    fn beam_argument_checks() {
        let step = |_: &[usize]| Ok(vec![0.0, 0.0]);
        assert!(beam_search(step, 1, 0, 1.0, 3).is_err());
        assert!(beam_search(step, 1, 2, 0.0, 3).is_err());
    }
}
