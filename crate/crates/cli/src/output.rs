//! Result rendering as an aligned table, CSV, or JSON.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use clap::ValueEnum;
use pipq::bench::{self, MetricsReport};
use serde_json::Value;

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Table,
    Csv,
    Json,
}

/// Ordered list of named fields.
#[derive(Debug, Clone, Default)]
pub struct Record(Vec<(&'static str, Value)>);

impl Record {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &'static str, v: impl Into<Value>) {
        self.0.push((key, v.into()));
    }

    fn to_json(&self) -> Value {
        Value::Object(self.0.iter().map(|(k, v)| (k.to_string(), v.clone())).collect())
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => match n.as_f64() {
            Some(f) if n.is_f64() => format!("{f:.4}"),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

pub struct Sink {
    w: Box<dyn Write>,
    format: Format,
}

impl Sink {
    pub fn open(path: Option<&Path>, format: Format) -> Result<Self, String> {
        let w: Box<dyn Write> = match path {
            Some(p) => Box::new(BufWriter::new(
                File::create(p).map_err(|e| format!("cannot create {}: {e}", p.display()))?,
            )),
            None => Box::new(io::stdout().lock()),
        };
        Ok(Sink { w, format })
    }

    pub fn report(&mut self, r: &MetricsReport) -> Result<(), String> {
        match self.format {
            Format::Csv => bench::write_csv(std::slice::from_ref(r), &mut self.w, true).map_err(|e| e.to_string())?,
            Format::Json => writeln!(self.w, "{}", r.to_json()).map_err(|e| e.to_string())?,
            Format::Table => {
                let rows: Vec<Record> = r
                    .trials
                    .iter()
                    .map(|t| {
                        let mut rec = Record::new();
                        rec.push("trial", t.trial);
                        rec.push("Mops", t.mops);
                        rec.push("ins Mops", t.insert_mops);
                        rec.push("del Mops", t.delete_mops);
                        rec.push("empty", t.empty_deletes);
                        rec.push("fast", t.fast);
                        rec.push("slower", t.slower);
                        rec.push("slowest", t.slowest);
                        rec.push("batch", t.batch_mean);
                        rec
                    })
                    .collect();
                writeln!(self.w, "{} {} on {} thread(s)", r.queue, r.workload, r.threads).map_err(|e| e.to_string())?;
                self.table(&rows)?;
                let mut s = format!(
                    "mean {:.3} Mops (insert {:.3}, delete {:.3}); paths fast {:.3} slower {:.3} slowest {:.4}; batch mean {:.3}",
                    r.throughput_mops, r.insert_mops, r.delete_mops, r.paths.fast, r.paths.slower, r.paths.slowest, r.coordinator_batch_mean
                );
                if let (Some(a), Some(b)) = (r.phase1_mops, r.phase2_mops) {
                    s += &format!("; phase 1 {a:.3} Mops, phase 2 {b:.3} Mops");
                }
                s += &format!(
                    "; latency us p50/p99 insert {:.2}/{:.2} delete {:.2}/{:.2}",
                    r.insert_latency.p50_us, r.insert_latency.p99_us, r.delete_latency.p50_us, r.delete_latency.p99_us
                );
                writeln!(self.w, "{s}").map_err(|e| e.to_string())?;
            }
        }
        self.w.flush().map_err(|e| e.to_string())
    }

    pub fn record(&mut self, rec: &Record) -> Result<(), String> {
        if self.format == Format::Table {
            let width = rec.0.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
            for (k, v) in &rec.0 {
                writeln!(self.w, "{k:<width$}  {}", cell(v)).map_err(|e| e.to_string())?;
            }
            return self.w.flush().map_err(|e| e.to_string());
        }
        self.records(std::slice::from_ref(rec))
    }

    pub fn records(&mut self, rows: &[Record]) -> Result<(), String> {
        match self.format {
            Format::Table => self.table(rows)?,
            Format::Json => {
                let v = match rows {
                    [one] => one.to_json(),
                    _ => Value::Array(rows.iter().map(Record::to_json).collect()),
                };
                writeln!(self.w, "{}", serde_json::to_string_pretty(&v).unwrap()).map_err(|e| e.to_string())?;
            }
            Format::Csv => {
                let mut wr = csv::Writer::from_writer(&mut self.w);
                if let Some(first) = rows.first() {
                    wr.write_record(first.0.iter().map(|(k, _)| *k)).map_err(|e| e.to_string())?;
                }
                for r in rows {
                    wr.write_record(r.0.iter().map(|(_, v)| match v {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    }))
                    .map_err(|e| e.to_string())?;
                }
                wr.flush().map_err(|e| e.to_string())?;
            }
        }
        self.w.flush().map_err(|e| e.to_string())
    }

    fn table(&mut self, rows: &[Record]) -> Result<(), String> {
        let Some(first) = rows.first() else {
            return Ok(());
        };
        let cells: Vec<Vec<String>> = rows.iter().map(|r| r.0.iter().map(|(_, v)| cell(v)).collect()).collect();
        let widths: Vec<usize> = first
            .0
            .iter()
            .enumerate()
            .map(|(i, (k, _))| cells.iter().map(|c| c[i].len()).chain([k.len()]).max().unwrap())
            .collect();
        let line = |items: Vec<&str>| {
            items
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        writeln!(self.w, "{}", line(first.0.iter().map(|(k, _)| *k).collect())).map_err(|e| e.to_string())?;
        for c in &cells {
            writeln!(self.w, "{}", line(c.iter().map(String::as_str).collect())).map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}
