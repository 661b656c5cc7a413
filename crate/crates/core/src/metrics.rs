//! Reading `metrics.jsonl` files and comparing two runs frame by frame.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::pipeline::FrameMetrics;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed metrics record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("frame counts differ: {a} has {na} frames, {b} has {nb}")]
    FrameCount {
        a: PathBuf,
        na: usize,
        b: PathBuf,
        nb: usize,
    },
    #[error("{path} holds no frames")]
    Empty { path: PathBuf },
}

pub fn read_metrics(path: &Path) -> Result<Vec<FrameMetrics>, MetricsError> {
    let text = fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| MetricsError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Differences `b - a` for one frame. Deltas are `None` where either run lacks the value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDelta {
    pub frame: usize,
    pub error_a_mm: Option<f64>,
    pub error_b_mm: Option<f64>,
    pub error_mm: Option<f64>,
    pub final_energy: Option<f64>,
    pub surfels: i64,
    pub nodes: i64,
    pub correspondences: i64,
    pub solver_iterations: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub frames: usize,
    pub mean_error_a_mm: Option<f64>,
    pub mean_error_b_mm: Option<f64>,
    /// `mean_error_b_mm / mean_error_a_mm`.
    pub error_ratio: Option<f64>,
    pub max_abs_error_delta_mm: Option<f64>,
    pub max_abs_energy_delta: Option<f64>,
    pub final_surfels_delta: i64,
    pub final_nodes_delta: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: PathBuf,
    pub b: PathBuf,
    pub frames: Vec<FrameDelta>,
    pub summary: ComparisonSummary,
}

fn final_energy(m: &FrameMetrics) -> Option<f64> {
    m.energies.last().map(|e| e.total)
}

fn mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let all: Option<Vec<f64>> = v.collect();
    all.filter(|a| !a.is_empty())
        .map(|a| a.iter().sum::<f64>() / a.len() as f64)
}

fn max_abs(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    v.flatten().map(f64::abs).reduce(f64::max)
}

pub fn compare(a: &[FrameMetrics], b: &[FrameMetrics]) -> (Vec<FrameDelta>, ComparisonSummary) {
    let i = |x: usize| x as i64;
    let deltas: Vec<FrameDelta> = a
        .iter()
        .zip(b)
        .map(|(ma, mb)| {
            let ea = ma.error.as_ref().map(|e| e.mean_mm);
            let eb = mb.error.as_ref().map(|e| e.mean_mm);
            FrameDelta {
                frame: ma.frame,
                error_a_mm: ea,
                error_b_mm: eb,
                error_mm: ea.zip(eb).map(|(x, y)| y - x),
                final_energy: final_energy(ma).zip(final_energy(mb)).map(|(x, y)| y - x),
                surfels: i(mb.surfels) - i(ma.surfels),
                nodes: i(mb.nodes) - i(ma.nodes),
                correspondences: i(mb.correspondences) - i(ma.correspondences),
                solver_iterations: i(mb.solver_iterations) - i(ma.solver_iterations),
            }
        })
        .collect();
    let mean_a = mean(deltas.iter().map(|d| d.error_a_mm));
    let mean_b = mean(deltas.iter().map(|d| d.error_b_mm));
    let summary = ComparisonSummary {
        frames: deltas.len(),
        mean_error_a_mm: mean_a,
        mean_error_b_mm: mean_b,
        error_ratio: mean_a
            .zip(mean_b)
            .filter(|(x, _)| *x > 0.0)
            .map(|(x, y)| y / x),
        max_abs_error_delta_mm: max_abs(deltas.iter().map(|d| d.error_mm)),
        max_abs_energy_delta: max_abs(deltas.iter().map(|d| d.final_energy)),
        final_surfels_delta: deltas.last().map_or(0, |d| d.surfels),
        final_nodes_delta: deltas.last().map_or(0, |d| d.nodes),
    };
    (deltas, summary)
}

/// Compares two metrics files. Both must hold the same number of frames.
pub fn compare_runs(a: &Path, b: &Path) -> Result<Comparison, MetricsError> {
    let ma = read_metrics(a)?;
    let mb = read_metrics(b)?;
    if ma.is_empty() {
        return Err(MetricsError::Empty { path: a.into() });
    }
    if ma.len() != mb.len() {
        return Err(MetricsError::FrameCount {
            a: a.into(),
            na: ma.len(),
            b: b.into(),
            nb: mb.len(),
        });
    }
    let (frames, summary) = compare(&ma, &mb);
    Ok(Comparison {
        a: a.into(),
        b: b.into(),
        frames,
        summary,
    })
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.prec$}"))
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "a: {}", self.a.display())?;
        writeln!(f, "b: {}", self.b.display())?;
        writeln!(
            f,
            "{:>6} {:>10} {:>10} {:>10} {:>12} {:>8} {:>6}",
            "frame", "err_a_mm", "err_b_mm", "d_err_mm", "d_energy", "d_surf", "d_node"
        )?;
        for d in &self.frames {
            writeln!(
                f,
                "{:>6} {:>10} {:>10} {:>10} {:>12} {:>8} {:>6}",
                d.frame,
                opt(d.error_a_mm, 3),
                opt(d.error_b_mm, 3),
                opt(d.error_mm, 3),
                opt(d.final_energy, 6),
                d.surfels,
                d.nodes
            )?;
        }
        let s = &self.summary;
        writeln!(f, "frames             {}", s.frames)?;
        writeln!(f, "mean error a (mm)  {}", opt(s.mean_error_a_mm, 3))?;
        writeln!(f, "mean error b (mm)  {}", opt(s.mean_error_b_mm, 3))?;
        writeln!(f, "error ratio b/a    {}", opt(s.error_ratio, 3))?;
        writeln!(f, "max |d error| (mm) {}", opt(s.max_abs_error_delta_mm, 3))?;
        write!(f, "max |d energy|     {}", opt(s.max_abs_energy_delta, 6))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{ErrorMetrics, StageTimings};
    use std::io::Write;

    fn frame(i: usize, err: f64) -> FrameMetrics {
        FrameMetrics {
            frame: i,
            surfels: 100 + i,
            nodes: 10,
            new_nodes: 0,
            correspondences: 90,
            fused: 80,
            appended: 5,
            removed: 0,
            degenerate_warps: 0,
            solver_iterations: 3,
            energies: Vec::new(),
            termination: None,
            error: Some(ErrorMetrics {
                mean_mm: err,
                median_mm: err,
                motion_mm: 10.0,
                objects: Vec::new(),
            }),
            timings_ms: StageTimings::default(),
        }
    }

    fn write(dir: &Path, name: &str, frames: &[FrameMetrics]) -> PathBuf {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        for m in frames {
            writeln!(f, "{}", serde_json::to_string(m).unwrap()).unwrap();
        }
        path
    }

    #[test]
    fn self_comparison_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.jsonl", &[frame(0, 1.0), frame(1, 2.0)]);
        let c = compare_runs(&a, &a).unwrap();
        assert!(c
            .frames
            .iter()
            .all(|d| d.error_mm == Some(0.0) && d.surfels == 0));
        assert_eq!(c.summary.error_ratio, Some(1.0));
        assert_eq!(c.summary.max_abs_error_delta_mm, Some(0.0));
    }

    #[test]
    fn ratio_and_deltas() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.jsonl", &[frame(0, 1.0), frame(1, 3.0)]);
        let b = write(dir.path(), "b.jsonl", &[frame(0, 5.0), frame(1, 7.0)]);
        let c = compare_runs(&a, &b).unwrap();
        assert_eq!(c.summary.error_ratio, Some(3.0));
        assert_eq!(c.frames[1].error_mm, Some(4.0));
    }

    #[test]
    fn malformed_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.jsonl", &[frame(0, 1.0)]);
        let mut text = fs::read_to_string(&a).unwrap();
        text.push_str("{not json\n");
        fs::write(&a, text).unwrap();
        let err = compare_runs(&a, &a).unwrap_err().to_string();
        assert!(err.contains("a.jsonl:2"), "{err}");
    }

    #[test]
    fn frame_count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.jsonl", &[frame(0, 1.0)]);
        let b = write(dir.path(), "b.jsonl", &[frame(0, 1.0), frame(1, 1.0)]);
        assert!(matches!(
            compare_runs(&a, &b),
            Err(MetricsError::FrameCount { .. })
        ));
    }
}
