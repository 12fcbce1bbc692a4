//! JSON and CSV outputs.

use std::path::Path;

use mome_core::analysis::{ActivationHistogram, SimilarityMatrix};
use mome_core::trainer::EvalMetrics;
use serde::Serialize;

use crate::error::{self, Result};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    error::write(path, s.as_bytes())
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let finish = |w: &mut csv::Writer<Vec<u8>>, rows: &mut dyn Iterator<Item = Vec<String>>| -> csv::Result<()> {
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        Ok(())
    };
    finish(&mut w, &mut rows.into_iter()).expect("in-memory CSV cannot fail");
    let bytes = w.into_inner().expect("in-memory CSV cannot fail");
    error::write(path, &bytes)
}

/// One row per rate pair.
pub fn write_eval_csv(path: &Path, rows: &[EvalMetrics]) -> Result<()> {
    write_csv(
        path,
        &["audio_rate", "video_rate", "out_of_grid", "samples", "symbol_error_rate", "token_accuracy", "mean_nll"],
        rows.iter().map(|m| {
            vec![
                m.rates.audio.to_string(),
                m.rates.video.to_string(),
                m.out_of_grid.to_string(),
                m.samples.to_string(),
                m.symbol_error_rate.to_string(),
                m.token_accuracy.to_string(),
                m.mean_nll.to_string(),
            ]
        }),
    )
}

pub fn write_histogram_csv(path: &Path, hist: &ActivationHistogram) -> Result<()> {
    let pairs = hist.grid.pairs();
    let mut rows = Vec::new();
    for l in 0..hist.n_layers() {
        for (s, p) in pairs.iter().enumerate() {
            let freq = hist.frequencies(l, s);
            for (e, (&c, f)) in hist.counts[l][s].iter().zip(freq).enumerate() {
                rows.push(vec![
                    l.to_string(),
                    p.audio.to_string(),
                    p.video.to_string(),
                    e.to_string(),
                    c.to_string(),
                    f.to_string(),
                ]);
            }
        }
    }
    write_csv(path, &["layer", "audio_rate", "video_rate", "expert", "count", "frequency"], rows)
}

/// Long format: one line per matrix entry.
pub fn write_similarity_csv(path: &Path, sim: &SimilarityMatrix) -> Result<()> {
    let v = &sim.values;
    let rows = (0..v.rows()).flat_map(|i| {
        (0..v.cols()).map(move |j| vec![i.to_string(), j.to_string(), v.get2(i, j).to_string()])
    });
    write_csv(path, &["row", "col", "cosine"], rows.collect::<Vec<_>>())
}

/// Rows by label, one SER column per rate pair.
pub fn write_ablation_csv(path: &Path, labels: &[String], metrics: &[Vec<EvalMetrics>], overlap: &[Option<f64>]) -> Result<()> {
    let mut header = vec!["value".to_string()];
    if let Some(first) = metrics.first() {
        header.extend(first.iter().map(|m| format!("ser{}", m.rates)));
    }
    header.push("overlap".into());
    let rows = labels.iter().zip(metrics).zip(overlap).map(|((l, ms), o)| {
        let mut r = vec![l.clone()];
        r.extend(ms.iter().map(|m| m.symbol_error_rate.to_string()));
        r.push(o.map_or_else(String::new, |v| v.to_string()));
        r
    });
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(path, &header, rows.collect::<Vec<_>>())
}
