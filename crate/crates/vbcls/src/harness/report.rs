//! Report files: `report.json`, `summary.csv`, and one loss-history CSV per
//! (target, seed). All numbers use Rust's shortest-round-trip float
//! formatting, so identical runs produce identical bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::EpochStats;

use super::RunReport;

/// Replaces anything outside `[A-Za-z0-9_-]` so domain names stay usable in
/// file names.
fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn fmt_opt(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

/// Loss-history CSV text for one training run, one row per epoch.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut text = String::from("epoch,L1,L2,L_CE1,L_CE2,L_yhat,total_f,train_acc\n");
    for e in history {
        let l = &e.losses;
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            e.epoch, l.l1, l.l2, l.l_ce1, l.l_ce2, l.l_yhat, l.total_f, e.train_accuracy
        ));
    }
    text
}

/// Writes the report files into `out_dir`, creating it if needed.
pub fn emit_report(report: &RunReport, out_dir: impl AsRef<Path>) -> Result<()> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let json_path = out_dir.join("report.json");
    let mut json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Config(format!("could not serialize report: {e}")))?;
    json.push('\n');
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

    let summary_path = out_dir.join("summary.csv");
    let mut writer = csv::Writer::from_path(&summary_path)
        .map_err(|e| Error::CsvFormat {
            path: summary_path.clone(),
            line: 0,
            message: e.to_string(),
        })?;
    let write_row = |writer: &mut csv::Writer<fs::File>, row: &[String]| {
        writer.write_record(row).map_err(|e| Error::CsvFormat {
            path: summary_path.clone(),
            line: 0,
            message: e.to_string(),
        })
    };
    write_row(
        &mut writer,
        &["target", "variant", "mean", "sd", "n_seeds"].map(String::from),
    )?;
    for target in &report.targets {
        write_row(
            &mut writer,
            &[
                target.target.clone(),
                report.variant.name().to_string(),
                fmt_opt(target.mean_accuracy),
                fmt_opt(target.sd_accuracy),
                target.seeds.len().to_string(),
            ],
        )?;
    }
    writer.flush().map_err(|e| Error::io(&summary_path, e))?;

    for target in &report.targets {
        for (seed_idx, run) in target.seeds.iter().enumerate() {
            let name = format!("history_{}_{}.csv", sanitize(&target.target), seed_idx);
            let path = out_dir.join(name);
            fs::write(&path, history_csv(&run.history)).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}
