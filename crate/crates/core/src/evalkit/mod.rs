//! Objective metrics: F0-RMSE in octaves and frame-level semitone accuracy
//! over commonly voiced frames, plus a probe-classifier label-recovery score.

mod melf0;
mod probe;

pub use melf0::mel_f0;
pub use probe::{chance_level, label_recovery, Probe, ProbeConfig};

use std::fmt::Write as _;

use crate::audiofeat::F0Track;
use crate::{Error, Result};

fn voiced_log_ratios(reference: &F0Track, generated: &F0Track) -> Result<Vec<f64>> {
    if reference.n_frames() != generated.n_frames() {
        return Err(Error::Domain(format!(
            "F0 tracks differ in length: {} vs {}",
            reference.n_frames(),
            generated.n_frames()
        )));
    }
    Ok(reference
        .f0_hz
        .iter()
        .zip(&generated.f0_hz)
        .filter(|(r, g)| **r > 0.0 && **g > 0.0)
        .map(|(r, g)| g.log2() - r.log2())
        .collect())
}

/// RMS of `log2(gen/ref)` over frames voiced in both tracks; `None` when no
/// frame is.
pub fn f0_rmse(reference: &F0Track, generated: &F0Track) -> Result<Option<f64>> {
    let r = voiced_log_ratios(reference, generated)?;
    Ok((!r.is_empty()).then(|| (r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt()))
}

/// Fraction of commonly voiced frames whose offset rounds to zero semitones.
pub fn semitone_accuracy(reference: &F0Track, generated: &F0Track) -> Result<Option<f64>> {
    let r = voiced_log_ratios(reference, generated)?;
    Ok((!r.is_empty()).then(|| r.iter().filter(|v| (12.0 * **v).round() == 0.0).count() as f64 / r.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentReport {
    pub name: String,
    pub f0_rmse: Option<f64>,
    pub s_acc: Option<f64>,
    pub n_voiced: usize,
    pub label_recovery: Option<f64>,
}

/// Pooled metrics over all segments' commonly voiced frames.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub f0_rmse: Option<f64>,
    pub s_acc: Option<f64>,
    pub n_voiced: usize,
    /// Mean over segments that carry a value.
    pub label_recovery: Option<f64>,
    pub segments: Vec<SegmentReport>,
}

/// One evaluation unit: name, reference and generated tracks, optional
/// label-recovery score.
pub struct Segment<'a> {
    pub name: &'a str,
    pub reference: &'a F0Track,
    pub generated: &'a F0Track,
    pub label_recovery: Option<f64>,
}

impl EvalReport {
    pub fn from_segments(segments: &[Segment]) -> Result<Self> {
        let mut pooled = Vec::new();
        let mut reports = Vec::with_capacity(segments.len());
        for s in segments {
            let r = voiced_log_ratios(s.reference, s.generated)
                .map_err(|e| Error::Domain(format!("{}: {e}", s.name)))?;
            reports.push(SegmentReport {
                name: s.name.to_string(),
                f0_rmse: f0_rmse(s.reference, s.generated)?,
                s_acc: semitone_accuracy(s.reference, s.generated)?,
                n_voiced: r.len(),
                label_recovery: s.label_recovery,
            });
            pooled.extend(r);
        }
        let rmse = (!pooled.is_empty()).then(|| (pooled.iter().map(|v| v * v).sum::<f64>() / pooled.len() as f64).sqrt());
        let acc = (!pooled.is_empty())
            .then(|| pooled.iter().filter(|v| (12.0 * **v).round() == 0.0).count() as f64 / pooled.len() as f64);
        let recoveries: Vec<f64> = reports.iter().filter_map(|r| r.label_recovery).collect();
        let label_recovery = (!recoveries.is_empty()).then(|| recoveries.iter().sum::<f64>() / recoveries.len() as f64);
        Ok(EvalReport { f0_rmse: rmse, s_acc: acc, n_voiced: pooled.len(), label_recovery, segments: reports })
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "absent".to_string(), |v| format!("{v:.4}"));
        let mut out = String::new();
        writeln!(out, "{:<24} {:>10} {:>8} {:>8} {:>10}", "segment", "f0_rmse", "s_acc", "voiced", "recovery").unwrap();
        for s in &self.segments {
            writeln!(
                out,
                "{:<24} {:>10} {:>8} {:>8} {:>10}",
                s.name,
                fmt(s.f0_rmse),
                fmt(s.s_acc),
                s.n_voiced,
                fmt(s.label_recovery)
            )
            .unwrap();
        }
        writeln!(
            out,
            "{:<24} {:>10} {:>8} {:>8} {:>10}",
            "all",
            fmt(self.f0_rmse),
            fmt(self.s_acc),
            self.n_voiced,
            fmt(self.label_recovery)
        )
        .unwrap();
        out
    }

    /// `key=value` lines; absent metrics are written as `absent`.
    pub fn to_key_values(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "absent".to_string(), |v| format!("{v}"));
        format!(
            "f0_rmse_octaves={}\ns_acc={}\nn_voiced={}\nlabel_recovery={}\nn_segments={}\n",
            fmt(self.f0_rmse),
            fmt(self.s_acc),
            self.n_voiced,
            fmt(self.label_recovery),
            self.segments.len()
        )
    }
}
