//! Output files. Every file carries the config digest; no timestamps are written.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

pub struct OutputDir {
    dir: PathBuf,
    digest: String,
}

impl OutputDir {
    pub fn create(dir: PathBuf, digest: String) -> Result<Self, CliError> {
        fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir, digest })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn digest_comment(&self) -> String {
        format!("config_digest={}", self.digest)
    }

    /// Writes a CSV table headed by a `# config_digest=...` line.
    pub fn write_csv(&self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        write_csv_to(&path, &self.digest, header, rows)?;
        Ok(path)
    }

    /// Writes `value` as pretty JSON with a leading `config_digest` field.
    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut json = serde_json::to_value(value).map_err(|e| CliError::Estimation(e.to_string()))?;
        let mut map = serde_json::Map::new();
        map.insert("config_digest".into(), self.digest.clone().into());
        if let serde_json::Value::Object(fields) = &mut json {
            map.append(fields);
        } else {
            map.insert("result".into(), json);
        }
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(map))
            .map_err(|e| CliError::Estimation(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

pub fn write_csv_to(path: &Path, digest: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut out = Vec::new();
    writeln!(out, "# config_digest={digest}")?;
    render_csv(&mut out, header, rows)?;
    fs::write(path, out).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn render_csv(out: &mut impl Write, header: &[String], rows: &[Vec<String>]) -> std::io::Result<()> {
    writeln!(out, "{}", header.join(","))?;
    for r in rows {
        writeln!(out, "{}", r.join(","))?;
    }
    Ok(())
}

/// Shortest round-trip form, in exponent notation for very small or large
/// magnitudes; empty for NaN.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if v.is_nan() {
        String::new()
    } else if a != 0.0 && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

/// Prints a summary line; a closed stdout is not an error.
pub fn say(line: std::fmt::Arguments<'_>) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

pub fn gamma_label(g: &[f64]) -> String {
    format!("({})", g.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
}

pub fn gamma_columns(prefix: &str, k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("{prefix}_{i}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, -3.0, 1e-17, -2.7755575615628914e-17, 123456.789, 3e20] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(num(f64::NAN), "");
        assert_eq!(num(-2.5e-17), "-2.5e-17");
        assert_eq!(num(0.0), "0");
        assert_eq!(gamma_label(&[0.5, -1.0]), "(0.5,-1)");
    }

    #[test]
    fn json_carries_digest() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutputDir::create(dir.path().join("o"), "abc".into()).unwrap();
        let p = out.write_json("x.json", &serde_json::json!({"a": 1})).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(v["config_digest"], "abc");
        assert_eq!(v["a"], 1);
        let p = out.write_csv("x.csv", &["a".into()], &[vec!["1".into()]]).unwrap();
        assert_eq!(fs::read_to_string(p).unwrap(), "# config_digest=abc\na\n1\n");
    }
}
