use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::run::MetricsReport;
use crate::tensor::Tensor;
use crate::{Error, Result};

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| Error::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(contents))
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// Header record with config and aggregates, then one record per round per client.
pub fn to_jsonl(report: &MetricsReport) -> Result<String> {
    let mut out = String::new();
    let header = json!({
        "type": "header",
        "config": report.config,
        "test_mean": report.test_mean,
        "test_std": report.test_std,
        "wall_clock_secs": report.wall_clock_secs,
    });
    out.push_str(&serde_json::to_string(&header)?);
    out.push('\n');
    for seed in &report.seeds {
        for rec in &seed.records {
            let mut value = serde_json::to_value(rec)?;
            value["type"] = json!("round");
            value["seed"] = json!(seed.seed);
            out.push_str(&serde_json::to_string(&value)?);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn summary_csv(report: &MetricsReport) -> String {
    let mut out = String::from("seed,best_round,best_val,best_test,server_calls,wall_clock_secs\n");
    for s in &report.seeds {
        let round = s.best_round.map_or(String::new(), |r| r.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.seed, round, s.best_val, s.best_test, s.server_calls, s.wall_clock_secs
        ));
    }
    out.push_str(&format!("mean,,,{},,\nstd,,,{},,\n", report.test_mean, report.test_std));
    out
}

/// Square matrix as CSV with 12 significant digits per value.
pub fn matrix_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row_slice(i).iter().map(|v| format!("{v:.11e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_matrix_csv(text: &str) -> Result<Tensor> {
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            line.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::from_rows(&rows)?)
}

/// Writes `similarity_seed{s}_factor{k}.csv` for every seed that has a final similarity state.
pub fn write_similarity(dir: &Path, report: &MetricsReport) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for seed in &report.seeds {
        let Some(state) = &seed.similarity else { continue };
        for (k, m) in state.similarity.iter().enumerate() {
            let path = dir.join(format!("similarity_seed{}_factor{k}.csv", seed.seed));
            write_file(&path, matrix_csv(m).as_bytes())?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Writes `report.json`, `rounds.jsonl`, `summary.csv` and the similarity matrices.
pub fn export_report(dir: &Path, report: &MetricsReport) -> Result<Vec<PathBuf>> {
    let mut paths = vec![dir.join("report.json"), dir.join("rounds.jsonl"), dir.join("summary.csv")];
    write_file(&paths[0], serde_json::to_string_pretty(report)?.as_bytes())?;
    write_file(&paths[1], to_jsonl(report)?.as_bytes())?;
    write_file(&paths[2], summary_csv(report).as_bytes())?;
    paths.extend(write_similarity(dir, report)?);
    Ok(paths)
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}
