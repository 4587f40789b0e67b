//! JSON-lines metrics stream with sorted keys.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::Result;
use crate::objectives::LossReport;

/// One metrics line. Keys serialize in sorted order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Record(pub BTreeMap<String, Value>);

impl Record {
    pub fn new(kind: &str, step: u64, epoch: usize) -> Self {
        let mut r = Record::default();
        r.set("kind", kind);
        r.set("step", step);
        r.set("epoch", epoch);
        r
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.0.insert(key.to_string(), value.into());
        self
    }

    /// Stores `NaN`/infinite values as `null`.
    pub fn set_f64(&mut self, key: &str, value: f64) -> &mut Self {
        let v = if value.is_finite() { Value::from(value) } else { Value::Null };
        self.0.insert(key.to_string(), v);
        self
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.0.get(key)
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.0.get(key).and_then(Value::as_f64)
    }

    pub fn kind(&self) -> Option<&str> {
        self.0.get("kind").and_then(Value::as_str)
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(&self.0).expect("metrics values serialize")
    }
}

pub fn train_record(step: u64, epoch: usize, lr: f64, r: &LossReport) -> Record {
    let mut rec = Record::new("train", step, epoch);
    rec.set_f64("lr", lr)
        .set_f64("mlm", r.mlm)
        .set_f64("nsp", r.nsp)
        .set_f64("caption", r.caption)
        .set_f64("pwcl", r.pwcl)
        .set_f64("total", r.total)
        .set_f64("aps", r.aps);
    rec
}

/// Adds `recall@1`, `recall@5`, `recall@10`.
pub fn set_recall(rec: &mut Record, recall: &[f64; 3]) {
    for (k, v) in [1, 5, 10].iter().zip(recall) {
        rec.set_f64(&format!("recall@{k}"), *v);
    }
}

/// Receives metrics records in step order.
pub trait MetricsSink {
    fn record(&mut self, rec: &Record) -> Result<()>;
    /// Called at the end of every epoch.
    fn flush(&mut self) -> Result<()> {
        Ok(())
    }
}

impl MetricsSink for Vec<Record> {
    fn record(&mut self, rec: &Record) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Discards records.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &Record) -> Result<()> {
        Ok(())
    }
}

pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonlWriter {
            out: BufWriter::new(File::create(path)?),
        })
    }
}

impl MetricsSink for JsonlWriter {
    fn record(&mut self, rec: &Record) -> Result<()> {
        self.out.write_all(rec.to_line().as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

impl Drop for JsonlWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(Record(serde_json::from_str(l)?)))
        .collect()
}
