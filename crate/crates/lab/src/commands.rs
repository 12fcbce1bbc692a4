//! The lab's commands. Every artifact lives under one output directory:
//!
//! ```text
//! config.toml            resolved configuration
//! data/                  manifest.json, train.bin, val.bin, test.bin
//! backbone.ckpt          pretrained backbone and rate-1 projectors
//! pretrain_log.json
//! adapters.ckpt          backbone plus trained projectors and MoME modules
//! train_log.json
//! eval.json, eval.csv
//! analysis/              expert_activation.csv, overlap.json,
//!                        similarity_*.csv, alignment.json, cost.json
//! ablate/<dimension>/    one sub-directory per value, report.json, report.csv
//! ```

use std::path::{Path, PathBuf};

use mome_core::analysis::{
    cost_report, cross_scale_overlap, expert_activation_stats, similarity_matrix, window_alignment, CostRow,
    WindowAlignment,
};
use mome_core::backbone::Model;
use mome_core::matryoshka::{compress, CompressionMode, Modality, RatePair, TokenSequence};
use mome_core::mome::Placement;
use mome_core::synthdata::{Sample, Split};
use mome_core::trainer::{evaluate, pretrain, train_adapters, Decoding, EvalMetrics, TrainLog};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointKind};
use crate::config::ExperimentConfig;
use crate::dataset::{self, Manifest};
use crate::error::{LabError, Result};
use crate::exec::LabExecutor;
use crate::report;

/// Tolerance for ties when counting window-aligned similarity rows.
pub const ALIGNMENT_TOL: f64 = 1e-12;

pub struct Lab {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub exec: LabExecutor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: CheckpointKind,
    pub rows: Vec<EvalMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub m: usize,
    pub per_layer: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub samples: usize,
    pub audio_rates: (usize, usize),
    pub video_rates: (usize, usize),
    pub audio: WindowAlignment,
    pub video: WindowAlignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    #[serde(flatten)]
    pub row: CostRow,
    pub token_reduction: f64,
    pub flops_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub overlap: Option<OverlapReport>,
    pub alignment: AlignmentReport,
    pub cost: Vec<CostEntry>,
}

/// Result of training adapters on a frozen backbone and evaluating them.
#[derive(Debug, Clone)]
pub struct AdapterRun {
    pub model: Model,
    pub log: TrainLog,
    pub eval: Vec<EvalMetrics>,
    pub overlap: Option<OverlapReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AblationDim {
    Placement,
    TopK,
    NRouted,
    SharedRouter,
    ScaleWeights,
}

impl AblationDim {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationDim::Placement => "placement",
            AblationDim::TopK => "top-k",
            AblationDim::NRouted => "n-routed",
            AblationDim::SharedRouter => "shared-router",
            AblationDim::ScaleWeights => "scale-weights",
        }
    }

    /// `cfg` with one value applied; weights are comma-separated numbers.
    pub fn apply(self, cfg: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let bad = |what: &str| LabError::Config(format!("invalid {what} value {value:?} for {}", self.as_str()));
        let mut c = cfg.clone();
        match self {
            AblationDim::Placement => c.mome.placement = Placement::parse(value).map_err(|_| bad("placement"))?,
            AblationDim::TopK => c.mome.top_k = value.trim().parse().map_err(|_| bad("integer"))?,
            AblationDim::NRouted => c.mome.n_routed = value.trim().parse().map_err(|_| bad("integer"))?,
            AblationDim::SharedRouter => c.mome.shared_router = value.trim().parse().map_err(|_| bad("boolean"))?,
            AblationDim::ScaleWeights => {
                c.scale_weights = value
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("weight list"))?;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub eval: Vec<EvalMetrics>,
    pub overlap: Option<f64>,
    pub final_balance_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dimension: AblationDim,
    pub rows: Vec<AblationRow>,
}

/// Parses `A,V`.
pub fn parse_rates(s: &str) -> Result<RatePair> {
    let bad = || LabError::Config(format!("rate pair {s:?} is not of the form A,V with positive integers"));
    let (a, v) = s.split_once(',').ok_or_else(bad)?;
    let audio: usize = a.trim().parse().map_err(|_| bad())?;
    let video: usize = v.trim().parse().map_err(|_| bad())?;
    if audio == 0 || video == 0 {
        return Err(bad());
    }
    Ok(RatePair { audio, video })
}

fn log(msg: impl AsRef<str>) {
    eprintln!("[mome] {}", msg.as_ref());
}

impl Lab {
    pub fn new(cfg: ExperimentConfig, out: Option<PathBuf>, exec: LabExecutor) -> Self {
        let out = out.unwrap_or_else(|| cfg.output_dir.clone());
        Lab { cfg, out, exec }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn backbone_path(&self) -> PathBuf {
        self.out.join("backbone.ckpt")
    }

    pub fn adapters_path(&self) -> PathBuf {
        self.out.join("adapters.ckpt")
    }

    pub fn write_config(&self) -> Result<()> {
        self.cfg.save(&self.out.join("config.toml"))
    }

    pub fn samples(&self, split: Split) -> Result<Vec<Sample>> {
        dataset::read_split(&self.data_dir(), split, &self.cfg.synth)
    }

    pub fn gendata(&self) -> Result<Manifest> {
        let m = dataset::write_dataset(&self.data_dir(), &self.cfg.synth, &self.cfg.data, &self.exec)?;
        log(format!(
            "wrote {} / {} / {} samples to {}",
            self.cfg.data.train,
            self.cfg.data.val,
            self.cfg.data.test,
            self.data_dir().display()
        ));
        Ok(m)
    }

    pub fn pretrain(&self) -> Result<(Model, TrainLog)> {
        let train = self.samples(Split::Train)?;
        let mut model = Model::new(self.cfg.model.clone(), self.cfg.seed)?;
        let tc = self.cfg.pretrain_config();
        log(format!("pretraining for {} steps", tc.total_steps(train.len())));
        let tlog = pretrain(&mut model, &tc, &train, &self.exec)?;
        checkpoint::save(&self.backbone_path(), &model, CheckpointKind::Backbone, &self.cfg, tlog.steps.len())?;
        report::write_json(&self.out.join("pretrain_log.json"), &tlog)?;
        if let Some(last) = tlog.steps.last() {
            log(format!("final pretraining loss {:.4}", last.total));
        }
        Ok((model, tlog))
    }

    pub fn load_backbone(&self) -> Result<Model> {
        let (m, meta) = checkpoint::load(&self.backbone_path(), &self.cfg)?;
        if meta.kind != CheckpointKind::Backbone {
            return Err(LabError::integrity(&self.backbone_path(), "expected a backbone checkpoint"));
        }
        Ok(m)
    }

    /// Attaches adapters from `cfg` to a copy of `backbone`, trains them on
    /// `train` and evaluates every grid pair on `test`.
    pub fn adapter_run(
        &self,
        cfg: &ExperimentConfig,
        backbone: &Model,
        train: &[Sample],
        test: &[Sample],
    ) -> Result<AdapterRun> {
        let mut model = backbone.without_adapters()?;
        model.attach_adapters(cfg.adapter_spec(), cfg.seed)?;
        let tlog = train_adapters(&mut model, &cfg.train_config(), &cfg.scale_weights()?, train, &self.exec)?;
        let eval = cfg
            .grid
            .pairs()
            .into_iter()
            .map(|p| evaluate(&model, test, p, Decoding::Greedy, &self.exec))
            .collect::<mome_core::Result<Vec<_>>>()?;
        let overlap = self.overlap(&model, test)?;
        Ok(AdapterRun {
            model,
            log: tlog,
            eval,
            overlap,
        })
    }

    fn overlap(&self, model: &Model, data: &[Sample]) -> Result<Option<OverlapReport>> {
        let Some(ad) = model.adapters() else { return Ok(None) };
        if ad.spec.mome.n_routed == 0 || ad.spec.grid.len() < 2 {
            return Ok(None);
        }
        let hist = expert_activation_stats(model, data, &self.exec)?;
        let m = ad.spec.mome.top_k.max(1);
        let per_layer = cross_scale_overlap(&hist, m)?;
        let mean = per_layer.iter().sum::<f64>() / per_layer.len() as f64;
        Ok(Some(OverlapReport { m, per_layer, mean }))
    }

    pub fn train(&self) -> Result<AdapterRun> {
        let backbone = self.load_backbone()?;
        let train = self.samples(Split::Train)?;
        let val = self.samples(Split::Val)?;
        log(format!(
            "training adapters over {} grid cells for {} steps",
            self.cfg.grid.len(),
            self.cfg.train.total_steps(train.len())
        ));
        let run = self.adapter_run(&self.cfg, &backbone, &train, &val)?;
        checkpoint::save(&self.adapters_path(), &run.model, CheckpointKind::Adapters, &self.cfg, run.log.steps.len())?;
        report::write_json(&self.out.join("train_log.json"), &run.log)?;
        for m in &run.eval {
            log(format!("validation {}: SER {:.4}", m.rates, m.symbol_error_rate));
        }
        Ok(run)
    }

    /// Evaluates a checkpoint (adapters if present, else the backbone) on
    /// the test split at `rates` or at every grid pair.
    pub fn eval(&self, rates: Option<RatePair>, ckpt: Option<&Path>, decoding: Decoding) -> Result<EvalReport> {
        let path = match ckpt {
            Some(p) => p.to_path_buf(),
            None if self.adapters_path().exists() => self.adapters_path(),
            None => self.backbone_path(),
        };
        let (model, meta) = checkpoint::load(&path, &self.cfg)?;
        let pairs = match (rates, model.adapters()) {
            (Some(p), _) => vec![p],
            (None, Some(ad)) => ad.spec.grid.pairs(),
            (None, None) => vec![RatePair::UNCOMPRESSED],
        };
        let test = self.samples(Split::Test)?;
        let rows = pairs
            .into_iter()
            .map(|p| evaluate(&model, &test, p, decoding, &self.exec))
            .collect::<mome_core::Result<Vec<_>>>()?;
        for m in &rows {
            let flag = if m.out_of_grid { " (out of grid)" } else { "" };
            log(format!(
                "{}{flag}: SER {:.4}  accuracy {:.4}  NLL {:.4}",
                m.rates, m.symbol_error_rate, m.token_accuracy, m.mean_nll
            ));
        }
        let rep = EvalReport {
            checkpoint: meta.kind,
            rows,
        };
        report::write_json(&self.out.join("eval.json"), &rep)?;
        report::write_eval_csv(&self.out.join("eval.csv"), &rep.rows)?;
        Ok(rep)
    }

    fn projected(&self, model: &Model, seq: &TokenSequence, r: usize, mode: CompressionMode) -> Result<mome_core::Tensor> {
        Ok(model.project(&compress(seq, r, mode)?)?)
    }

    /// Fine-versus-coarse similarity of one stream, as (matrix, alignment).
    pub fn stream_similarity(
        &self,
        model: &Model,
        seq: &TokenSequence,
        fine: usize,
        coarse: usize,
    ) -> Result<(mome_core::analysis::SimilarityMatrix, WindowAlignment)> {
        let mode = model.adapters().map_or(CompressionMode::Avg, |a| a.spec.mode);
        let f = self.projected(model, seq, fine, mode)?;
        let c = self.projected(model, seq, coarse, mode)?;
        let sim = similarity_matrix(&c, &f)?;
        let al = window_alignment(&sim, coarse, fine, seq.len(), ALIGNMENT_TOL);
        Ok((sim, al))
    }

    pub fn analyze(&self, ckpt: Option<&Path>) -> Result<AnalysisReport> {
        let path = ckpt.map_or_else(|| self.adapters_path(), Path::to_path_buf);
        let (model, _) = checkpoint::load(&path, &self.cfg)?;
        let test = self.samples(Split::Test)?;
        let dir = self.out.join("analysis");

        let overlap = match model.adapters() {
            Some(ad) if ad.spec.mome.n_routed > 0 => {
                let hist = expert_activation_stats(&model, &test, &self.exec)?;
                report::write_histogram_csv(&dir.join("expert_activation.csv"), &hist)?;
                self.overlap(&model, &test)?
            }
            _ => None,
        };
        if let Some(o) = &overlap {
            report::write_json(&dir.join("overlap.json"), o)?;
            log(format!("mean cross-scale overlap (m = {}): {:.4}", o.m, o.mean));
        }

        let g = &self.cfg.grid;
        let (fa, ca) = (g.audio_rates()[0], g.max_audio_rate());
        let (fv, cv) = (g.video_rates()[0], g.max_video_rate());
        let n = self.cfg.analysis.similarity_samples.min(test.len());
        let mut audio = WindowAlignment { inside: 0, total: 0 };
        let mut video = audio;
        for (k, s) in test[..n].iter().enumerate() {
            let (a, v) = (s.audio_seq()?, s.video_seq()?);
            let (sa, wa) = self.stream_similarity(&model, &a, fa, ca)?;
            let (sv, wv) = self.stream_similarity(&model, &v, fv, cv)?;
            if k == 0 {
                report::write_similarity_csv(&dir.join("similarity_audio.csv"), &sa)?;
                report::write_similarity_csv(&dir.join("similarity_video.csv"), &sv)?;
                let mode = model.adapters().map_or(CompressionMode::Avg, |a| a.spec.mode);
                let cross = similarity_matrix(
                    &self.projected(&model, &a, fa, mode)?,
                    &self.projected(&model, &v, fv, mode)?,
                )?;
                report::write_similarity_csv(&dir.join("similarity_cross.csv"), &cross)?;
            }
            audio.inside += wa.inside;
            audio.total += wa.total;
            video.inside += wv.inside;
            video.total += wv.total;
        }
        let alignment = AlignmentReport {
            samples: n,
            audio_rates: (fa, ca),
            video_rates: (fv, cv),
            audio,
            video,
        };
        report::write_json(&dir.join("alignment.json"), &alignment)?;
        log(format!(
            "window alignment: audio {:.4}, video {:.4}",
            audio.fraction(),
            video.fraction()
        ));

        let cost = self.cost()?;
        report::write_json(&dir.join("cost.json"), &cost)?;
        Ok(AnalysisReport {
            overlap,
            alignment,
            cost,
        })
    }

    /// Token and FLOP table for the configured source lengths at (1,1) and
    /// every grid pair.
    pub fn cost(&self) -> Result<Vec<CostEntry>> {
        let [ta, tv] = self.cfg.analysis.cost_lengths;
        let mut pairs = vec![RatePair::UNCOMPRESSED];
        pairs.extend(self.cfg.grid.pairs().into_iter().filter(|p| *p != RatePair::UNCOMPRESSED));
        let rows = cost_report(&self.cfg.model, Some(&self.cfg.mome), ta, tv, &pairs, self.cfg.analysis.rounding)?;
        let base = rows[0];
        Ok(rows
            .into_iter()
            .map(|row| CostEntry {
                row,
                token_reduction: base.total_tokens as f64 / row.total_tokens as f64,
                flops_reduction: base.flops / row.flops,
            })
            .collect())
    }

    /// One adapter run per value on the shared backbone and data.
    pub fn ablate(&self, dim: AblationDim, values: &[String]) -> Result<AblationReport> {
        if values.is_empty() {
            return Err(LabError::Config("ablation needs at least one value".into()));
        }
        let cfgs = values
            .iter()
            .map(|v| dim.apply(&self.cfg, v))
            .collect::<Result<Vec<_>>>()?;
        let backbone = self.load_backbone()?;
        let train = self.samples(Split::Train)?;
        let test = self.samples(Split::Test)?;
        let base = self.out.join("ablate").join(dim.as_str());
        let mut rows = Vec::new();
        for (value, cfg) in values.iter().zip(&cfgs) {
            log(format!("{} = {value}", dim.as_str()));
            let run = self.adapter_run(cfg, &backbone, &train, &test)?;
            let dir = base.join(sanitize(value));
            checkpoint::save(&dir.join("adapters.ckpt"), &run.model, CheckpointKind::Adapters, cfg, run.log.steps.len())?;
            report::write_json(&dir.join("train_log.json"), &run.log)?;
            report::write_eval_csv(&dir.join("eval.csv"), &run.eval)?;
            rows.push(AblationRow {
                value: value.clone(),
                overlap: run.overlap.as_ref().map(|o| o.mean),
                final_balance_loss: run.log.final_report().map(|r| r.mean_balance_loss),
                eval: run.eval,
            });
        }
        let rep = AblationReport { dimension: dim, rows };
        report::write_json(&base.join("report.json"), &rep)?;
        let labels: Vec<String> = rep.rows.iter().map(|r| r.value.clone()).collect();
        let metrics: Vec<Vec<EvalMetrics>> = rep.rows.iter().map(|r| r.eval.clone()).collect();
        let overlaps: Vec<Option<f64>> = rep.rows.iter().map(|r| r.overlap).collect();
        report::write_ablation_csv(&base.join("report.csv"), &labels, &metrics, &overlaps)?;
        Ok(rep)
    }
}

fn sanitize(v: &str) -> String {
    v.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// Stream of a sample as a rate-1 token sequence.
pub fn source_stream(s: &Sample, m: Modality) -> Result<TokenSequence> {
    Ok(TokenSequence::source(m, s.stream(m)?.clone())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_parsing() {
        assert_eq!(parse_rates("4,2").unwrap(), RatePair { audio: 4, video: 2 });
        assert_eq!(parse_rates(" 16 , 5 ").unwrap(), RatePair { audio: 16, video: 5 });
        for bad in ["4", "4,0", "a,b", "4,2,1"] {
            assert_eq!(parse_rates(bad).unwrap_err().exit_code(), 2);
        }
    }

    #[test]
    fn ablation_values() {
        let cfg = ExperimentConfig::default();
        assert_eq!(AblationDim::TopK.apply(&cfg, "4").unwrap().mome.top_k, 4);
        assert!(!AblationDim::SharedRouter.apply(&cfg, "false").unwrap().mome.shared_router);
        assert_eq!(
            AblationDim::Placement.apply(&cfg, "ffn-parallel").unwrap().mome.placement,
            Placement::FfnParallel
        );
        assert_eq!(AblationDim::ScaleWeights.apply(&cfg, "1,1,1,1").unwrap().scale_weights, vec![1.0; 4]);
        for (d, v) in [
            (AblationDim::TopK, "99"),
            (AblationDim::TopK, "x"),
            (AblationDim::SharedRouter, "maybe"),
            (AblationDim::ScaleWeights, "1,2"),
            (AblationDim::Placement, "sideways"),
        ] {
            assert_eq!(d.apply(&cfg, v).unwrap_err().exit_code(), 2);
        }
    }

    #[test]
    fn cost_rows_reproduce_token_counts() {
        let lab = Lab::new(ExperimentConfig::default(), Some("unused".into()), LabExecutor::Sequential);
        let cost = lab.cost().unwrap();
        let total = |a, v| {
            cost.iter()
                .find(|c| c.row.rates == RatePair { audio: a, video: v })
                .unwrap()
                .row
                .total_tokens
        };
        assert_eq!(total(1, 1), 1673);
        assert_eq!(total(16, 5), 184);
        assert_eq!(total(4, 2), 561);
    }
}
