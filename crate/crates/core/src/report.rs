//! Run-directory files: JSON echoes, plot-ready CSVs, and the manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attribution::CoreSelection;
use crate::distill::{LineageRegistry, CYCLE_DIR_PREFIX};
use crate::error::{Error, Result};
use crate::sae::TrainingLog;

pub const CARRYOVER_HEADER: &str = "cycle,origin_cycle,count";
pub const L0_TRAJECTORY_HEADER: &str = "step,l0_core,l0_noncore";
pub const METRICS_HEADER: &str =
    "regime,k,k_noncore,c,l0_core,l0_noncore,l0_global,mse,fve,tokens,seed";
pub const FAILURES_HEADER: &str = "row,error";

pub const CARRYOVER_FILE: &str = "carryover_origins.csv";
pub const L0_TRAJECTORY_FILE: &str = "l0_trajectories.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Renders a CSV with the given header; fields must not contain commas.
pub fn csv(header: &str, rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn l0_trajectory_csv(log: &TrainingLog) -> String {
    let mut out = String::from(L0_TRAJECTORY_HEADER);
    out.push('\n');
    for i in 0..log.len() {
        let _ = writeln!(
            out,
            "{},{},{}",
            log.steps[i], log.l0_core[i], log.l0_noncore[i]
        );
    }
    out
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub regime: String,
    pub k: usize,
    pub k_noncore: usize,
    pub c: usize,
    pub l0_core: f64,
    pub l0_noncore: f64,
    pub l0_global: f64,
    pub mse: f64,
    pub fve: f64,
    pub tokens: u64,
    pub seed: u64,
}

impl MetricsRow {
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.regime.clone(),
            self.k.to_string(),
            self.k_noncore.to_string(),
            self.c.to_string(),
            self.l0_core.to_string(),
            self.l0_noncore.to_string(),
            self.l0_global.to_string(),
            self.mse.to_string(),
            self.fve.to_string(),
            self.tokens.to_string(),
            self.seed.to_string(),
        ]
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    csv(METRICS_HEADER, rows.iter().map(MetricsRow::fields))
}

/// `(cycle, origin_cycle, count)` for every selection, origins ascending.
pub fn carryover_rows(
    selections: &[CoreSelection],
    lineage: &LineageRegistry,
) -> Result<Vec<(usize, usize, usize)>> {
    let mut rows = Vec::new();
    for sel in selections {
        for (origin, count) in lineage.origin_histogram(sel)? {
            rows.push((sel.cycle, origin, count));
        }
    }
    Ok(rows)
}

pub fn carryover_csv(rows: &[(usize, usize, usize)]) -> String {
    csv(
        CARRYOVER_HEADER,
        rows.iter()
            .map(|(c, o, n)| vec![c.to_string(), o.to_string(), n.to_string()]),
    )
}

/// What [`emit_reports`] wrote and what it could not find, relative to the
/// run directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub written: Vec<PathBuf>,
    pub gaps: Vec<String>,
}

/// Rebuilds `carryover_origins.csv` from the selections and lineage in a
/// distillation run directory. Missing pieces are listed as gaps rather than
/// failing the whole emission.
pub fn emit_reports(run_dir: impl AsRef<Path>) -> Result<Manifest> {
    let run_dir = run_dir.as_ref();
    let mut manifest = Manifest::default();
    let mut cycles: Vec<usize> = fs::read_dir(run_dir)
        .map_err(|e| Error::io(run_dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_prefix(CYCLE_DIR_PREFIX))
                .and_then(|t| t.parse().ok())
        })
        .collect();
    cycles.sort_unstable();

    let rel = |p: &Path| p.strip_prefix(run_dir).unwrap_or(p).to_path_buf();
    let mut selections = Vec::new();
    for t in &cycles {
        let dir = run_dir.join(format!("{CYCLE_DIR_PREFIX}{t}"));
        let sel = dir.join("selection.json");
        if sel.exists() {
            selections.push(read_json::<CoreSelection>(&sel)?);
        } else {
            manifest
                .gaps
                .push(format!("{}: missing", rel(&sel).display()));
        }
        let traj = dir.join(L0_TRAJECTORY_FILE);
        if traj.exists() {
            manifest.written.push(rel(&traj));
        } else {
            manifest
                .gaps
                .push(format!("{}: missing", rel(&traj).display()));
        }
    }
    if cycles.is_empty() {
        manifest.gaps.push("no cycle directories".into());
    }

    let lineage_path = run_dir.join("lineage.json");
    if lineage_path.exists() {
        let lineage: LineageRegistry = read_json(&lineage_path)?;
        match carryover_rows(&selections, &lineage) {
            Ok(rows) => {
                let path = run_dir.join(CARRYOVER_FILE);
                write_text(&path, &carryover_csv(&rows))?;
                manifest.written.push(rel(&path));
            }
            Err(e) => manifest.gaps.push(format!("{CARRYOVER_FILE}: {e}")),
        }
    } else {
        manifest.gaps.push("lineage.json: missing".into());
    }
    for p in ["distilled_core.json", "core.bin", METRICS_FILE] {
        if run_dir.join(p).exists() {
            manifest.written.push(PathBuf::from(p));
        }
    }
    for gap in &manifest.gaps {
        log::warn!("report gap: {gap}");
    }
    write_json(run_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_headers() {
        let golden = include_str!("../tests/golden/headers.txt");
        let lines: Vec<&str> = golden.lines().collect();
        assert_eq!(
            lines,
            vec![CARRYOVER_HEADER, L0_TRAJECTORY_HEADER, METRICS_HEADER]
        );
    }

    #[test]
    fn metrics_row_matches_header_width() {
        let row = MetricsRow {
            regime: "dense-core".into(),
            k: 16,
            k_noncore: 15,
            c: 20,
            l0_core: 1.5,
            l0_noncore: 15.0,
            l0_global: 16.5,
            mse: 0.01,
            fve: 0.9,
            tokens: 1000,
            seed: 3,
        };
        let text = metrics_csv(&[row]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
        assert_eq!(lines[1], "dense-core,16,15,20,1.5,15,16.5,0.01,0.9,1000,3");
    }

    #[test]
    fn trajectory_csv() {
        let log = TrainingLog {
            steps: vec![1, 2],
            l0_core: vec![3.0, 2.5],
            l0_noncore: vec![4.0, 4.0],
            loss: vec![1.0, 0.5],
        };
        assert_eq!(
            l0_trajectory_csv(&log),
            "step,l0_core,l0_noncore\n1,3,4\n2,2.5,4\n"
        );
    }

    #[test]
    fn missing_artifacts_become_gaps() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("cycle_0")).unwrap();
        let m = emit_reports(dir.path()).unwrap();
        assert!(m.gaps.iter().any(|g| g.contains("selection.json")));
        assert!(m.gaps.iter().any(|g| g.contains("lineage.json")));
        assert!(dir.path().join(MANIFEST_FILE).exists());
    }
}
