//! Artifact writers. Every file starts with the version string and the full
//! resolved config: a header record in JSON-lines files, `#` comment lines
//! in CSV files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::config::{to_toml, RunConfig, VERSION};

#[derive(Debug, Clone)]
pub struct Provenance {
    pub command: String,
    pub config: RunConfig,
}

impl Provenance {
    pub fn header(&self) -> Value {
        json!({
            "type": "header",
            "version": VERSION,
            "command": self.command,
            "config": self.config,
        })
    }

    fn comments(&self) -> String {
        let mut out = format!("# {VERSION}\n# command: {}\n", self.command);
        for line in to_toml(&self.config).lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        out
    }
}

pub fn ensure_dir(dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)
}

pub fn write_jsonl(path: &Path, prov: &Provenance, records: &[Value]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for v in std::iter::once(&prov.header()).chain(records) {
        serde_json::to_writer(&mut buf, v)?;
        buf.push(b'\n');
    }
    fs::write(path, buf)
}

/// JSON-lines with the header followed by preformatted lines.
pub fn write_jsonl_raw(path: &Path, prov: &Provenance, body: &str) -> std::io::Result<()> {
    let mut buf = serde_json::to_vec(&prov.header())?;
    buf.push(b'\n');
    buf.extend_from_slice(body.as_bytes());
    fs::write(path, buf)
}

pub fn write_csv(
    path: &Path,
    prov: &Provenance,
    header: &[String],
    rows: &[Vec<String>],
) -> std::io::Result<()> {
    let mut buf = prov.comments().into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)
}

/// One `x,y,err` series.
pub fn write_plot(
    path: &Path,
    prov: &Provenance,
    points: &[(String, f64, f64)],
) -> std::io::Result<()> {
    let header = ["x", "y", "err"].map(String::from);
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|(x, y, e)| vec![x.clone(), num(*y), num(*e)])
        .collect();
    write_csv(path, prov, &header, &rows)
}

/// Shortest representation that parses back to the same value.
pub fn num(v: f64) -> String {
    format!("{v}")
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_cases() {
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn csv_embeds_config_and_parses_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let prov = Provenance {
            command: "train".into(),
            config: RunConfig::default(),
        };
        write_plot(&path, &prov, &[("1".into(), 0.5, 0.25), ("2".into(), 0.1, 0.0)]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(&format!("# {VERSION}\n")));
        assert!(text.contains("# [train.dig]"));
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        assert_eq!(r.headers().unwrap(), vec!["x", "y", "err"]);
        let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(&rows[0][1], "0.5");
    }
}
