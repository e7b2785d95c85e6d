use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::Serialize;

/// Writes `rows` as CSV below a single `#` header line carrying provenance.
pub fn write_csv<T: Serialize>(path: &Path, command: &str, hash: &str, seed: u64, rows: &[T]) -> Result<()> {
    let mut file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    writeln!(file, "# poinf {command} config_sha256={hash} seed={seed} generated={ts}")?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Header fields and records of a file written by [`write_csv`].
pub struct CsvFile {
    pub meta: BTreeMap<String, String>,
    pub headers: Vec<String>,
    pub records: Vec<Vec<String>>,
}

impl CsvFile {
    pub fn get(&self, row: &[String], column: &str) -> Result<String> {
        let i = self.headers.iter().position(|h| h == column).with_context(|| format!("missing column {column}"))?;
        Ok(row[i].clone())
    }

    pub fn number(&self, row: &[String], column: &str) -> Result<f64> {
        let v = self.get(row, column)?;
        v.parse().with_context(|| format!("column {column}: {v:?} is not a number"))
    }
}

pub fn read_csv(path: &Path) -> Result<CsvFile> {
    let mut reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let Some(header) = first.strip_prefix("# poinf ") else {
        bail!("{} has no poinf header line", path.display());
    };
    let meta = header
        .split_whitespace()
        .enumerate()
        .map(|(i, kv)| match kv.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => (if i == 0 { "command".into() } else { kv.to_string() }, kv.to_string()),
        })
        .collect();
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.iter().map(str::to_string).collect();
    let records = r.records().map(|rec| Ok(rec?.iter().map(str::to_string).collect())).collect::<Result<_>>()?;
    Ok(CsvFile { meta, headers, records })
}
