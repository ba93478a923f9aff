//! Writing a report as JSON or CSV.

use std::io::Write;
use std::path::Path;

use clap::ValueEnum;
use serde_json::Value;

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

/// Pretty JSON, or a CSV table with one row per element of `rows`.
/// Nested values in a row get dotted column names; lists of scalars stay
/// in one cell, separated by semicolons.
pub fn render(value: &Value, format: Format) -> Result<String, String> {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
            s.push('\n');
            Ok(s)
        }
        Format::Csv => match value {
            Value::Array(rows) if rows.iter().all(Value::is_object) => table(rows),
            _ => Err("CSV output is only available for tables".into()),
        },
    }
}

fn table(rows: &[Value]) -> Result<String, String> {
    let flat: Vec<Vec<(String, String)>> = rows
        .iter()
        .map(|r| {
            let mut pairs = Vec::new();
            flatten("", r, &mut pairs);
            pairs
        })
        .collect();
    let mut header: Vec<String> = Vec::new();
    for row in &flat {
        for (k, _) in row {
            if !header.contains(k) {
                header.push(k.clone());
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).map_err(|e| e.to_string())?;
    for row in &flat {
        let cells = header
            .iter()
            .map(|h| row.iter().find(|(k, _)| k == h).map_or("", |(_, v)| v.as_str()));
        w.write_record(cells).map_err(|e| e.to_string())?;
    }
    let bytes = w.into_inner().map_err(|e| e.to_string())?;
    String::from_utf8(bytes).map_err(|e| e.to_string())
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::Null => Some(String::new()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Number(n) => Some(n.to_string()),
        Value::String(s) => Some(s.clone()),
        _ => None,
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                flatten(&key(k), x, out);
            }
        }
        Value::Array(items) => {
            // Lists of scalars stay in one cell, separated by semicolons.
            if let Some(cells) = items.iter().map(scalar).collect::<Option<Vec<_>>>() {
                out.push((prefix.to_string(), cells.join(";")));
            } else {
                for (i, x) in items.iter().enumerate() {
                    flatten(&key(&i.to_string()), x, out);
                }
            }
        }
        _ => out.push((prefix.to_string(), scalar(v).unwrap_or_default())),
    }
}

pub fn emit_report(value: &Value, format: Format, out: Option<&Path>) -> Result<(), String> {
    let text = render(value, format)?;
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display())),
        None => std::io::stdout().lock().write_all(text.as_bytes()).map_err(|e| e.to_string()),
    }
}
