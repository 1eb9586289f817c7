use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::Result;

/// One named metric file: `{"metric", "seed", "config_hash", "values"}`.
/// Keys of `values` are kept sorted so output is byte-stable.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub metric: String,
    pub seed: u64,
    pub config_hash: String,
    pub values: BTreeMap<String, Value>,
}

impl MetricReport {
    pub fn new(metric: &str, seed: u64, config_hash: &str) -> Self {
        MetricReport {
            metric: metric.to_string(),
            seed,
            config_hash: config_hash.to_string(),
            values: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.values.insert(key.to_string(), value.into());
        self
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Writes a UTF-8 CSV with a header row. Floats use Rust's shortest
/// round-trip formatting (always `.` as decimal separator).
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}
