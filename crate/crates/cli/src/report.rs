//! CSV report writers and the one-line JSON summary.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use lite_core::gradcheck::GradReport;
use lite_core::lite::SamplingMode;
use lite_core::train::{EvalReport, TrainLogRow};

/// Training log: one row per task plus wall time.
pub struct TrainLogWriter {
    writer: csv::Writer<fs::File>,
}

impl TrainLogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path)
            .with_context(|| format!("creating training log {}", path.display()))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(["iteration", "task_seed", "loss", "query_acc", "tracked_count", "ms_elapsed"])?;
        Ok(TrainLogWriter { writer })
    }

    pub fn row(&mut self, row: &TrainLogRow, ms_elapsed: u128) -> Result<()> {
        self.writer.write_record([
            row.iteration.to_string(),
            row.task_seed.to_string(),
            row.loss.to_string(),
            row.query_acc.to_string(),
            row.tracked_count.to_string(),
            ms_elapsed.to_string(),
        ])?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

/// Evaluation report: one row per episode plus a summary row.
pub fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let file =
        fs::File::create(path).with_context(|| format!("creating eval report {}", path.display()))?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(["row", "episode_index", "task_seed", "accuracy", "ci95_halfwidth"])?;
    for row in &report.rows {
        writer.write_record([
            "episode".to_string(),
            row.episode_index.to_string(),
            row.task_seed.to_string(),
            row.accuracy.to_string(),
            String::new(),
        ])?;
    }
    writer.write_record([
        "summary".to_string(),
        report.rows.len().to_string(),
        String::new(),
        report.mean_accuracy.to_string(),
        report.ci95.to_string(),
    ])?;
    writer.flush()?;
    Ok(())
}

/// Bias/RMSE report. A `#` metadata line records the arm and sampling mode;
/// the header and value rows follow, scientific notation with 9 significant
/// digits.
pub fn write_grad_report_csv(
    path: &Path,
    report: &GradReport,
    sampling: SamplingMode,
    task_desc: &str,
) -> Result<()> {
    let mut text = String::new();
    text.push_str(&format!(
        "# arm={} sampling={} measured_param={} task={}\n",
        report.arm.name(),
        sampling.name(),
        report.measured_param,
        task_desc
    ));
    text.push_str("H,num_runs,bias_mse,avg_rmse\n");
    for row in &report.rows {
        text.push_str(&format!(
            "{},{},{:.8e},{:.8e}\n",
            row.h, row.num_runs, row.bias_mse, row.avg_rmse
        ));
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Parse a grad report CSV back (skipping `#` metadata lines).
pub fn read_grad_report_csv(path: &Path) -> Result<Vec<(usize, usize, f64, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        anyhow::ensure!(fields.len() == 4, "bad grad report row: {line}");
        rows.push((
            fields[0].parse()?,
            fields[1].parse()?,
            fields[2].parse()?,
            fields[3].parse()?,
        ));
    }
    Ok(rows)
}

/// Finite-difference check table.
pub fn write_gradcheck_csv(path: &Path, rows: &[(String, usize, f64, bool)]) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(["param", "elements", "max_rel_err", "pass"])?;
    for (param, elements, err, pass) in rows {
        writer.write_record([
            param.clone(),
            elements.to_string(),
            format!("{err:.8e}"),
            pass.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Memory accounting rows.
pub struct MemStatRow {
    pub mode: &'static str,
    pub n: usize,
    pub h: usize,
    pub tracked_count: u64,
    pub retained_scalars: u64,
    pub estimated_bytes: u64,
}

pub fn write_memstat_csv(path: &Path, rows: &[MemStatRow]) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(["mode", "n", "h", "tracked_count", "retained_scalars", "estimated_bytes"])?;
    for row in rows {
        writer.write_record([
            row.mode.to_string(),
            row.n.to_string(),
            row.h.to_string(),
            row.tracked_count.to_string(),
            row.retained_scalars.to_string(),
            row.estimated_bytes.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// One-line JSON summary on stdout. Values are pre-rendered; strings are
/// escaped minimally (quotes and backslashes).
pub fn json_summary(fields: &[(&str, JsonValue)]) -> String {
    let mut out = String::from("{");
    for (i, (key, value)) in fields.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('"');
        out.push_str(key);
        out.push_str("\":");
        match value {
            JsonValue::Str(s) => {
                out.push('"');
                out.push_str(&s.replace('\\', "\\\\").replace('"', "\\\""));
                out.push('"');
            }
            JsonValue::Num(n) => out.push_str(&n.to_string()),
            JsonValue::Int(n) => out.push_str(&n.to_string()),
        }
    }
    out.push('}');
    out
}

pub enum JsonValue {
    Str(String),
    Num(f64),
    Int(u64),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_summary_escapes_strings() {
        let line = json_summary(&[
            ("command", JsonValue::Str("train".into())),
            ("path", JsonValue::Str("a\"b".into())),
            ("loss", JsonValue::Num(0.5)),
            ("n", JsonValue::Int(3)),
        ]);
        assert_eq!(line, r#"{"command":"train","path":"a\"b","loss":0.5,"n":3}"#);
    }
}
