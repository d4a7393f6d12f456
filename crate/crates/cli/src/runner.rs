//! Sweep execution: expand the Cartesian product of sweep axes, run each
//! cell, and write per-cell CSVs plus a run summary.

use std::fs;
use std::path::{Path, PathBuf};

use airfl_core::data::{parse_libsvm, synth_logistic, SampleSet};
use airfl_core::rng::{stream, Purpose};
use airfl_core::runtime::{run_experiment, RoundRecord, CSV_HEADER};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::{apply_patch, value_label, ConfigDoc, SweepAxis};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub csv: Option<String>,
    pub rounds: usize,
    pub final_gap: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub status: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_name: String,
    pub cells: Vec<CellSummary>,
}

fn load_dataset(doc: &ConfigDoc) -> Result<SampleSet> {
    match doc.dataset.source.as_str() {
        "synthetic" => synth_logistic(
            doc.dataset.n,
            doc.dataset.d,
            doc.dataset.separation,
            &mut stream(doc.run.master_seed, Purpose::Synth),
        )
        .map_err(|e| anyhow::anyhow!("{e}")),
        "libsvm" => {
            let path = doc
                .dataset
                .path
                .as_ref()
                .context("dataset.source = \"libsvm\" requires dataset.path")?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
            parse_libsvm(&text).map_err(|e| anyhow::anyhow!("{e}"))
        }
        other => bail!("dataset.source: unknown source `{other}` (expected `synthetic` or `libsvm`)"),
    }
}

/// Cartesian product of sweep axes as (label, patches) pairs.
fn expand_cells(sweep: &[SweepAxis]) -> Vec<(String, Vec<(String, toml::Value)>)> {
    let mut cells: Vec<(String, Vec<(String, toml::Value)>)> = vec![(String::new(), vec![])];
    for axis in sweep {
        let short = axis.key.rsplit('.').next().unwrap_or(&axis.key);
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for (label, patches) in &cells {
            for val in &axis.values {
                let part = format!("{short}={}", value_label(val));
                let new_label = if label.is_empty() {
                    part
                } else {
                    format!("{label}__{part}")
                };
                let mut new_patches = patches.clone();
                new_patches.push((axis.key.clone(), val.clone()));
                next.push((new_label, new_patches));
            }
        }
        cells = next;
    }
    cells
}

pub fn write_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut out = String::with_capacity(64 + records.len() * 256);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Run every sweep cell. Returns the summary and whether all cells passed.
pub fn run(doc: &ConfigDoc, base_toml: &toml::Value) -> Result<(RunSummary, bool)> {
    let out_dir = PathBuf::from(&doc.output.dir);
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let cells = expand_cells(&doc.sweep);
    let mut summaries = Vec::with_capacity(cells.len());
    let mut all_ok = true;

    for (label, patches) in cells {
        let mut cell_value = base_toml.clone();
        for (key, val) in &patches {
            apply_patch(&mut cell_value, key, val)?;
        }
        let cell_doc: ConfigDoc = cell_value
            .try_into()
            .with_context(|| format!("cell `{label}`"))?;
        let csv_name = if label.is_empty() {
            format!("{}.csv", doc.run_name)
        } else {
            format!("{}__{}.csv", doc.run_name, label)
        };
        let cell_name = if label.is_empty() { "default".to_string() } else { label.clone() };

        let outcome = (|| -> Result<(usize, Option<f64>, Option<f64>)> {
            let dataset = load_dataset(&cell_doc)?;
            let cfg = cell_doc.run.to_run_config()?;
            cfg.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
            let (_, records) = run_experiment(cfg, &dataset).map_err(|e| anyhow::anyhow!("{e}"))?;
            if doc.output.csv {
                write_csv(&out_dir.join(&csv_name), &records)?;
            }
            let last = records.last();
            Ok((
                records.len(),
                last.map(|r| r.gap),
                last.map(|r| r.accuracy),
            ))
        })();

        match outcome {
            Ok((rounds, final_gap, final_accuracy)) => summaries.push(CellSummary {
                cell: cell_name,
                csv: doc.output.csv.then_some(csv_name),
                rounds,
                final_gap,
                final_accuracy,
                status: "ok".into(),
                error: None,
            }),
            Err(e) => {
                all_ok = false;
                summaries.push(CellSummary {
                    cell: cell_name,
                    csv: None,
                    rounds: 0,
                    final_gap: None,
                    final_accuracy: None,
                    status: "error".into(),
                    error: Some(format!("{e:#}")),
                });
            }
        }
    }

    let summary = RunSummary {
        run_name: doc.run_name.clone(),
        cells: summaries,
    };
    if doc.output.json_summary {
        let path = out_dir.join(format!("{}_summary.json", doc.run_name));
        fs::write(&path, serde_json::to_string_pretty(&summary)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok((summary, all_ok))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn run_text(text: &str, dir: &Path) -> (RunSummary, bool) {
        let mut doc = parse_config(text).unwrap();
        doc.output.dir = dir.to_string_lossy().into_owned();
        let mut base: toml::Value = toml::from_str(text).unwrap();
        apply_patch(&mut base, "output.dir", &toml::Value::String(doc.output.dir.clone())).unwrap();
        run(&doc, &base).unwrap()
    }

    const SMALL: &str = r#"
run_name = "t"

[dataset]
n = 200
d = 4

[run]
m = 3
k = 2
rounds = 3
gamma = 1e-3
snr_db = 60.0
sysopt_mode = "dca_only"
"#;

    #[test]
    fn single_cell_produces_csv_rows() {
        let dir = tempfile::tempdir().unwrap();
        let (summary, ok) = run_text(SMALL, dir.path());
        assert!(ok);
        assert_eq!(summary.cells.len(), 1);
        assert_eq!(summary.cells[0].rounds, 3);
        let csv = fs::read_to_string(dir.path().join("t.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], CSV_HEADER);
    }

    #[test]
    fn sweep_produces_one_csv_per_value() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "{SMALL}\n[[sweep]]\nkey = \"run.snr_db\"\nvalues = [40.0, 60.0, 80.0]\n"
        );
        let (summary, ok) = run_text(&text, dir.path());
        assert!(ok);
        assert_eq!(summary.cells.len(), 3);
        for v in ["40", "60", "80"] {
            assert!(dir.path().join(format!("t__snr_db={v}.csv")).exists());
        }
    }

    #[test]
    fn rerun_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run_text(SMALL, d1.path());
        run_text(SMALL, d2.path());
        let a = fs::read(d1.path().join("t.csv")).unwrap();
        let b = fs::read(d2.path().join("t.csv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_rounds_gives_summary_only() {
        let dir = tempfile::tempdir().unwrap();
        let text = SMALL.replace("rounds = 3", "rounds = 0");
        let (summary, ok) = run_text(&text, dir.path());
        assert!(ok);
        assert_eq!(summary.cells[0].rounds, 0);
        assert!(summary.cells[0].final_gap.is_none());
        let csv = fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1); // header only
    }

    #[test]
    fn summary_matches_published_schema() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "{SMALL}\n[[sweep]]\nkey = \"run.algorithm\"\nvalues = [\"proposed\", \"perfect_aggregation\"]\n"
        );
        run_text(&text, dir.path());
        let schema: serde_json::Value = serde_json::from_str(include_str!(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../schemas/summary.schema.json"
        )))
        .unwrap();
        let validator = jsonschema::validator_for(&schema).unwrap();
        let summary: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(dir.path().join("t_summary.json")).unwrap(),
        )
        .unwrap();
        assert!(validator.is_valid(&summary));
    }

    #[test]
    fn failing_cell_is_reported_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        // perfect_aggregation with a channel-using mode fails validation
        let text = format!(
            "{SMALL}\n[[sweep]]\nkey = \"run.algorithm\"\nvalues = [\"proposed\", \"perfect_aggregation\"]\n"
        );
        let (summary, ok) = run_text(&text, dir.path());
        assert!(!ok);
        assert_eq!(summary.cells.len(), 2);
        assert_eq!(summary.cells[0].status, "ok");
        assert_eq!(summary.cells[1].status, "error");
        assert!(summary.cells[1].error.is_some());
    }
}
