use std::fs;

use prunekit::dataset::Dataset;
use prunekit::probe::{TaskKind, TaskSpec};
use prunekit::synthfaces::attribute_bins;

use crate::args::TaskArgs;
use crate::error::CliError;

const BINARY: [&str; 4] = ["gender", "hat", "glasses", "beard"];

fn class_count(data: &Dataset, column: &str) -> Result<usize, CliError> {
    let v = data.column(column)?;
    let max = v.iter().copied().fold(0.0f32, f32::max);
    Ok(max as usize + 1)
}

/// Reads one task from `column`, `column:kind` or `a+b+c`, filling in bins
/// and class counts from the data.
pub fn parse_task(spec: &str, data: &Dataset) -> Result<TaskSpec, CliError> {
    if spec.contains('+') {
        let columns: Vec<String> = spec.split('+').map(str::to_string).collect();
        for c in &columns {
            data.column(c)?;
        }
        return Ok(TaskSpec::new(spec, TaskKind::Multilabel { columns }));
    }
    let (column, kind) = match spec.split_once(':') {
        Some((c, k)) => (c, Some(k)),
        None => (spec, None),
    };
    data.column(column)?;
    let column_s = column.to_string();
    let kind = match kind {
        Some("regression") => TaskKind::Regression { column: column_s },
        Some("binary") => TaskKind::Binary { column: column_s },
        Some("classes") => TaskKind::Classification {
            column: column_s,
            classes: class_count(data, column)?,
        },
        Some("binned") => TaskKind::Binned {
            column: column_s,
            edges: attribute_bins(column)
                .ok_or_else(|| CliError::Config(format!("no bins are defined for `{column}`")))?,
        },
        Some(other) => return Err(CliError::Config(format!("unknown task kind `{other}`"))),
        None if BINARY.contains(&column) => TaskKind::Binary { column: column_s },
        None => match attribute_bins(column) {
            Some(edges) => TaskKind::Binned { column: column_s, edges },
            None if column == "identity" || column.ends_with("_bin") => TaskKind::Classification {
                column: column_s,
                classes: class_count(data, column)?,
            },
            None => TaskKind::Regression { column: column_s },
        },
    };
    Ok(TaskSpec::new(column, kind))
}

pub fn resolve(args: &TaskArgs, data: &Dataset) -> Result<Vec<TaskSpec>, CliError> {
    let mut out = Vec::new();
    if let Some(path) = &args.tasks_file {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let parsed: Vec<TaskSpec> =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        out.extend(parsed);
    }
    for t in &args.tasks {
        out.push(parse_task(t, data)?);
    }
    if out.is_empty() {
        return Err(CliError::Config("no tasks given".into()));
    }
    Ok(out)
}
