//! CSV reports.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptivity::EnrichmentHistory;
use crate::error::{GmsError, Result};

pub const HEADER: &str = "method,contrast,level,dof,e,sum_eta2,lambda_min,wall_ms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub contrast: f64,
    pub level: usize,
    pub dof: usize,
    pub e: f64,
    pub sum_eta2: f64,
    /// `inf` once every face is saturated.
    pub lambda_min: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub series: String,
    pub dof: usize,
    pub e: f64,
}

pub fn rows(method: &str, contrast: f64, history: &EnrichmentHistory) -> Vec<ReportRow> {
    history
        .levels
        .iter()
        .map(|r| ReportRow {
            method: method.to_string(),
            contrast,
            level: r.level,
            dof: r.dof,
            e: r.e,
            sum_eta2: r.sum_eta2,
            lambda_min: r.lambda_min,
            wall_ms: r.wall_ms,
        })
        .collect()
}

fn csv_bytes<T: Serialize>(records: &[T], header: bool) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| GmsError::Parse(e.to_string()))?;
    }
    w.into_inner().map_err(|e| GmsError::Io(e.into_error()))
}

pub fn rows_to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut out = format!("{HEADER}\n").into_bytes();
    out.extend(csv_bytes(rows, false)?);
    String::from_utf8(out).map_err(|e| GmsError::Parse(e.to_string()))
}

pub fn parse_rows(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| GmsError::Parse(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != HEADER {
        return Err(GmsError::Parse(format!("unexpected report header {header:?}")));
    }
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| GmsError::Parse(e.to_string()))
}

pub fn plot_to_csv(points: &[PlotPoint]) -> Result<String> {
    let mut out = b"series,dof,e\n".to_vec();
    out.extend(csv_bytes(points, false)?);
    String::from_utf8(out).map_err(|e| GmsError::Parse(e.to_string()))
}

/// Write through a temporary sibling and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| GmsError::Config(format!("{} is not a file path", path.display())))?;
    let tmp: PathBuf = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<ReportRow> {
        vec![
            ReportRow {
                method: "offline".into(),
                contrast: 1e4,
                level: 0,
                dof: 224,
                e: 0.039841797,
                sum_eta2: 2.25e-7,
                lambda_min: 1.7,
                wall_ms: 12.5,
            },
            ReportRow {
                method: "offline".into(),
                contrast: 1e-6,
                level: 1,
                dof: 230,
                e: 1.0 / 3.0,
                sum_eta2: 0.0,
                lambda_min: f64::INFINITY,
                wall_ms: 0.0,
            },
        ]
    }

    #[test]
    fn header_is_exact_and_round_trips() {
        let text = rows_to_csv(&sample()).unwrap();
        assert_eq!(text.lines().next().unwrap(), HEADER);
        assert_eq!(text.lines().count(), 3);
        assert_eq!(parse_rows(&text).unwrap(), sample());
    }

    #[test]
    fn rejects_foreign_header() {
        assert!(parse_rows("a,b\n1,2\n").is_err());
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "two");
        let entries: Vec<_> = std::fs::read_dir(p.parent().unwrap()).unwrap().collect();
        assert_eq!(entries.len(), 1);
    }

    #[test]
    fn plot_points_have_their_own_header() {
        let text = plot_to_csv(&[PlotPoint {
            series: "uniform_l2_c1e4".into(),
            dof: 224,
            e: 0.5,
        }])
        .unwrap();
        assert_eq!(text, "series,dof,e\nuniform_l2_c1e4,224,0.5\n");
    }
}
