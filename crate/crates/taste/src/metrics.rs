//! Append-only JSONL training log.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use taste_core::train::Report;

use crate::error::{AppError, AppResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub end_of_epoch: bool,
    pub values: serde_json::Map<String, serde_json::Value>,
    /// Seconds since the log was opened; the only nondeterministic field.
    pub wall_s: f64,
}

pub struct MetricsLog {
    path: PathBuf,
    file: File,
    start: Instant,
    error: Option<AppError>,
    /// Echo epoch summaries to stderr.
    pub verbose: bool,
}

impl MetricsLog {
    pub fn open(path: &Path) -> AppResult<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| AppError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            start: Instant::now(),
            error: None,
            verbose: false,
        })
    }

    pub fn record(&mut self, phase: &str, epoch: usize, step: usize, lr: f64, end: bool, values: &[(String, f64)]) {
        let rec = MetricRecord {
            phase: phase.to_string(),
            epoch,
            step,
            lr,
            end_of_epoch: end,
            values: values
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::json!(v)))
                .collect(),
            wall_s: self.start.elapsed().as_secs_f64(),
        };
        if self.verbose && end {
            let shown: Vec<String> = values.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
            eprintln!("[{phase}] epoch {epoch}: {}", shown.join(" "));
        }
        let mut line = serde_json::to_string(&rec).expect("record serializes");
        line.push('\n');
        if let Err(e) = self.file.write_all(line.as_bytes()) {
            self.error.get_or_insert(AppError::io(&self.path, e));
        }
    }

    pub fn report(&mut self, r: &Report) {
        self.record(&r.phase, r.epoch, r.step, r.lr, r.end_of_epoch, &r.values);
    }

    /// Evaluation scalars outside any training loop.
    pub fn eval(&mut self, phase: &str, values: &[(String, f64)]) {
        self.record(phase, 0, 0, 0.0, true, values);
    }

    /// Surfaces the first write failure, if any.
    pub fn finish(mut self) -> AppResult<()> {
        self.file.flush().map_err(|e| AppError::io(&self.path, e))?;
        match self.error.take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fsutil::read_jsonl;

    #[test]
    fn appends_across_opens() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        for k in 0..2 {
            let mut log = MetricsLog::open(&path).unwrap();
            log.record("p", k, 3, 0.1, true, &[("loss".into(), 1.5)]);
            log.finish().unwrap();
        }
        let recs: Vec<MetricRecord> = read_jsonl(&path).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].epoch, 1);
        assert_eq!(recs[0].values["loss"], serde_json::json!(1.5));
    }
}
