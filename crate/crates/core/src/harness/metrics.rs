use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const HEADER: &str = "step,loss,lpf_spot,wall_time_s";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub lpf_spot: Option<f64>,
    pub wall_time_s: f64,
}

impl MetricsRow {
    fn to_line(&self) -> String {
        let lpf = self.lpf_spot.map(|v| format!("{v:e}")).unwrap_or_default();
        format!("{},{:e},{},{:.3}", self.step, self.loss, lpf, self.wall_time_s)
    }

    fn parse(line: &str) -> Option<Self> {
        let mut it = line.split(',');
        let step = it.next()?.parse().ok()?;
        let loss = it.next()?.parse().ok()?;
        let lpf = it.next()?;
        let lpf_spot = if lpf.is_empty() { None } else { Some(lpf.parse().ok()?) };
        let wall_time_s = it.next()?.parse().ok()?;
        it.next().is_none().then_some(Self {
            step,
            loss,
            lpf_spot,
            wall_time_s,
        })
    }

    /// The row without its wall-clock column, which is the only part that
    /// differs between reruns of the same config.
    pub fn deterministic_part(&self) -> (u64, u64, Option<u64>) {
        (self.step, self.loss.to_bits(), self.lpf_spot.map(f64::to_bits))
    }
}

/// Append-only CSV training log. Each row is flushed as written, so the file
/// is valid CSV whenever the trainer stops.
#[derive(Debug)]
pub struct MetricsLog {
    path: PathBuf,
    file: File,
    last_step: Option<u64>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{HEADER}").map_err(|e| Error::io(path, e))?;
        file.flush().map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            last_step: None,
        })
    }

    /// Reopens an existing log for a resumed run, dropping rows after `step`.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let kept: Vec<MetricsRow> = if path.exists() {
            read_metrics(path)?.into_iter().filter(|r| r.step <= step).collect()
        } else {
            Vec::new()
        };
        let mut log = Self::create(path)?;
        for row in &kept {
            log.append(row)?;
        }
        Ok(log)
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some(last) = self.last_step {
            if row.step <= last {
                return Err(Error::Config(format!(
                    "metrics rows must have increasing steps ({} after {last})",
                    row.step
                )));
            }
        }
        writeln!(self.file, "{}", row.to_line()).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        self.last_step = Some(row.step);
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 {
            if line != HEADER {
                return Err(Error::Format(format!("{}: unexpected header `{line}`", path.display())));
            }
            continue;
        }
        let row = MetricsRow::parse(&line)
            .ok_or_else(|| Error::Format(format!("{}: bad row {}: `{line}`", path.display(), i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64, lpf: Option<f64>) -> MetricsRow {
        MetricsRow {
            step,
            loss: 0.1 + step as f64,
            lpf_spot: lpf,
            wall_time_s: 0.5,
        }
    }

    #[test]
    fn rows_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut log = MetricsLog::create(&p).unwrap();
        let rows = vec![row(1, None), row(5, Some(1.0 / 3.0)), row(9, None)];
        for r in &rows {
            log.append(r).unwrap();
        }
        assert_eq!(read_metrics(&p).unwrap(), rows);
    }

    #[test]
    fn steps_must_increase() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = MetricsLog::create(&dir.path().join("m.csv")).unwrap();
        log.append(&row(3, None)).unwrap();
        assert!(log.append(&row(3, None)).is_err());
        assert!(log.append(&row(2, None)).is_err());
    }

    #[test]
    fn resume_truncates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut log = MetricsLog::create(&p).unwrap();
        for s in [1, 2, 3, 4] {
            log.append(&row(s, None)).unwrap();
        }
        drop(log);
        let mut log = MetricsLog::resume(&p, 2).unwrap();
        log.append(&row(3, Some(2.0))).unwrap();
        let steps: Vec<u64> = read_metrics(&p).unwrap().iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![1, 2, 3]);
    }
}
