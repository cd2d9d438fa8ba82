//! Deterministic report documents: JSON with sorted keys and 17 significant
//! digits per float, or a sequence of CSV tables.

use std::fmt::Write as _;
use std::str::FromStr;

use serde_json::{Map, Value};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitFormat {
    JsonDoc,
    CsvTables,
}

impl FromStr for EmitFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json_doc" => Ok(EmitFormat::JsonDoc),
            "csv_tables" => Ok(EmitFormat::CsvTables),
            other => Err(format!("unknown report format {other}")),
        }
    }
}

/// One CSV table. `meta` goes into a `# key=value ...` header line.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub meta: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            meta: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    /// A labelled numeric row.
    pub fn push(&mut self, label: &str, values: &[f64]) {
        let mut row = vec![label.to_string()];
        row.extend(values.iter().map(|&v| format_float(v)));
        self.rows.push(row);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub doc: Map<String, Value>,
    pub tables: Vec<Table>,
}

impl Report {
    pub fn new(command: &str) -> Self {
        let mut doc = Map::new();
        doc.insert("command".into(), command.into());
        doc.insert("report_version".into(), REPORT_VERSION.into());
        doc.insert("tool_version".into(), env!("CARGO_PKG_VERSION").into());
        Report {
            doc,
            tables: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.doc.insert(key.to_string(), value.into());
    }

    pub fn emit(&self, format: EmitFormat) -> String {
        match format {
            EmitFormat::JsonDoc => {
                let mut out = String::new();
                write_json(&Value::Object(self.doc.clone()), 0, &mut out);
                out.push('\n');
                out
            }
            EmitFormat::CsvTables => {
                let mut out = String::new();
                for (i, table) in self.tables.iter().enumerate() {
                    if i > 0 {
                        out.push('\n');
                    }
                    write!(out, "# table={}", table.name).unwrap();
                    for (k, v) in &table.meta {
                        write!(out, " {k}={v}").unwrap();
                    }
                    out.push('\n');
                    out.push_str(&csv_line(&table.columns));
                    for row in &table.rows {
                        out.push_str(&csv_line(row));
                    }
                }
                out
            }
        }
    }
}

/// `{:.16e}`: 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_line(fields: &[String]) -> String {
    let mut line = fields
        .iter()
        .map(|f| csv_field(f))
        .collect::<Vec<_>>()
        .join(",");
    line.push('\n');
    line
}

fn write_json(value: &Value, indent: usize, out: &mut String) {
    let pad = |n: usize| "  ".repeat(n);
    match value {
        Value::Null | Value::Bool(_) | Value::String(_) => out.push_str(&value.to_string()),
        Value::Number(num) => {
            if let Some(i) = num.as_i64() {
                write!(out, "{i}").unwrap();
            } else if let Some(u) = num.as_u64() {
                write!(out, "{u}").unwrap();
            } else {
                out.push_str(&format_float(num.as_f64().expect("finite number")));
            }
        }
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
            } else if items.iter().all(|v| v.is_number()) {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    write_json(item, indent, out);
                }
                out.push(']');
            } else {
                out.push_str("[\n");
                for (i, item) in items.iter().enumerate() {
                    out.push_str(&pad(indent + 1));
                    write_json(item, indent + 1, out);
                    out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
                }
                out.push_str(&pad(indent));
                out.push(']');
            }
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, key) in keys.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&Value::String(key.to_string()).to_string());
                out.push_str(": ");
                write_json(&map[key.as_str()], indent + 1, out);
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
    }
}

/// Floats as JSON numbers; non-finite values become `null`.
pub fn float(x: f64) -> Value {
    serde_json::Number::from_f64(x)
        .map(Value::Number)
        .unwrap_or(Value::Null)
}

pub fn floats(xs: &[f64]) -> Value {
    Value::Array(xs.iter().map(|&x| float(x)).collect())
}
