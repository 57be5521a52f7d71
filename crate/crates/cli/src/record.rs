//! Result records, config files and the single output writer.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "CRW_OUT_DIR";

pub fn artifact_version() -> String {
    format!("crw-{}+g{}", env!("CARGO_PKG_VERSION"), env!("CRW_GIT_REV"))
}

/// How a reported number was obtained.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Provenance {
    Exact,
    Mc { seed: u64, trials: u64 },
}

/// One line of output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    /// Subcommand words, e.g. `verify lemma0`.
    pub command: String,
    /// Effective parameters; feeding this back through `--config` reruns
    /// the experiment.
    pub config: Map<String, Value>,
    pub version: String,
    pub started_at: String,
    pub finished_at: String,
    pub payload: Value,
    /// Method behind each top-level payload field.
    pub provenance: BTreeMap<String, Provenance>,
}

/// Reads a flat parameter object, or the `config` of a stored record.
pub fn load_config(path: &Path) -> Result<Map<String, Value>, String> {
    let text = fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    // a record file may hold several lines; the first one carries the config
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let value: Value = serde_json::from_str(&text)
        .or_else(|_| serde_json::from_str(first))
        .map_err(|e| format!("config {} is not JSON: {e}", path.display()))?;
    let Value::Object(mut map) = value else {
        return Err(format!("config {} must be a JSON object", path.display()));
    };
    if map.contains_key("payload") {
        if let Some(Value::Object(inner)) = map.remove("config") {
            let mut inner = inner;
            if let Some(cmd) = map.remove("command") {
                inner.insert("command".into(), cmd);
            }
            return Ok(inner);
        }
    }
    Ok(map)
}

const SUBCOMMANDS: [&str; 8] = [
    "evolve",
    "solve",
    "simulate",
    "exponent",
    "barriers",
    "verify",
    "calibrate",
    "region",
];

fn flag_present(argv: &[String], flag: &str) -> bool {
    argv.iter()
        .any(|a| a == flag || a.starts_with(&format!("{flag}=")))
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Merges config values into `argv` (program name excluded). Flags already
/// on the command line win; the config's `command` supplies the subcommand
/// when none is given.
pub fn merge_config(argv: &[String], config: &Map<String, Value>) -> Result<Vec<String>, String> {
    let mut out: Vec<String> = Vec::new();
    let has_subcommand = argv.iter().any(|a| SUBCOMMANDS.contains(&a.as_str()));
    if !has_subcommand {
        match config.get("command") {
            Some(Value::String(cmd)) => out.extend(cmd.split_whitespace().map(str::to_string)),
            _ => return Err("no subcommand given and the config names none".into()),
        }
    }
    out.extend(argv.iter().cloned());
    for (key, value) in config {
        if key == "command" || key == "config" || key == "out" {
            continue;
        }
        let flag = format!("--{}", key.replace('_', "-"));
        if flag_present(argv, &flag) {
            continue;
        }
        match value {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => out.push(flag),
            Value::Array(items) => {
                let parts: Option<Vec<String>> = items.iter().map(scalar_text).collect();
                let parts =
                    parts.ok_or_else(|| format!("config key `{key}` holds a nested value"))?;
                out.push(format!("{flag}={}", parts.join(",")));
            }
            Value::Object(_) => return Err(format!("config key `{key}` holds a nested object")),
            other => out.push(format!("{flag}={}", scalar_text(other).expect("scalar"))),
        }
    }
    Ok(out)
}

/// Single writer for a run's records.
pub struct RecordWriter {
    sink: Box<dyn Write>,
    pub path: Option<PathBuf>,
}

impl RecordWriter {
    pub fn open(out: Option<&Path>, command: &str) -> io::Result<Self> {
        let path = match out {
            Some(p) => Some(p.to_path_buf()),
            None => std::env::var_os(OUT_DIR_ENV).map(|dir| {
                let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
                PathBuf::from(dir).join(format!("{}-{stamp}.ndjson", command.replace(' ', "-")))
            }),
        };
        let sink: Box<dyn Write> = match &path {
            Some(p) => {
                if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(parent)?;
                }
                Box::new(BufWriter::new(File::create(p)?))
            }
            None => Box::new(io::stdout().lock()),
        };
        Ok(RecordWriter { sink, path })
    }

    pub fn write(&mut self, record: &ResultRecord) -> io::Result<()> {
        serde_json::to_writer(&mut self.sink, record)?;
        self.sink.write_all(b"\n")?;
        self.sink.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn command_line_overrides_config() {
        let cfg = json!({"command": "evolve", "policy": "lazy:q=0.5", "n": 10, "dump": true, "target_lo": null})
            .as_object()
            .unwrap()
            .clone();
        let merged = merge_config(&args("--n 20"), &cfg).unwrap();
        assert_eq!(merged[0], "evolve");
        assert!(merged.contains(&"--n".to_string()) && merged.contains(&"20".to_string()));
        assert!(!merged.iter().any(|a| a == "--n=10"));
        assert!(merged.contains(&"--dump".to_string()));
        assert!(merged.contains(&"--policy=lazy:q=0.5".to_string()));
        assert!(!merged.iter().any(|a| a.starts_with("--target-lo")));
    }

    #[test]
    fn lists_join_with_commas() {
        let cfg = json!({"n_grid": [16, 32]}).as_object().unwrap().clone();
        let merged = merge_config(&args("exponent --policy lazy:q=0.5"), &cfg).unwrap();
        assert!(merged.contains(&"--n-grid=16,32".to_string()));
        assert!(merge_config(&args("--n 3"), &Map::new()).is_err());
    }
}
