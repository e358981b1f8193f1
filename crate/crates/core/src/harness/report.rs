use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::train::files;

/// One cell of the merged comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub algorithm: String,
    pub respacing: usize,
    pub bits: u32,
    /// Median over distinct runs; `None` if every run failed the cell.
    pub value: Option<f64>,
    pub delta_vs_fp32: Option<f64>,
    pub runs: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MergedReport {
    pub rows: Vec<ReportRow>,
    /// Report files that were expected but absent or unreadable.
    pub missing: Vec<PathBuf>,
    /// Distinct configurations merged; reruns of one config count once.
    pub runs: usize,
}

#[derive(Clone, Debug)]
struct SweepLine {
    variant: String,
    bits: u32,
    respacing: usize,
    value: Option<f64>,
    delta: Option<f64>,
}

fn parse_sweep(path: &Path) -> Result<Vec<SweepLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("variant,bits,respacing,metric,value,delta_vs_fp32") {
        return Err(Error::Format(format!("{}: unexpected header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let bad = || Error::Format(format!("{}: bad row `{l}`", path.display()));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let opt = |s: &str| -> Result<Option<f64>> {
                match s {
                    "" | "failed" => Ok(None),
                    s => s.parse().map(Some).map_err(|_| bad()),
                }
            };
            Ok(SweepLine {
                variant: f[0].to_string(),
                bits: f[1].parse().map_err(|_| bad())?,
                respacing: f[2].parse().map_err(|_| bad())?,
                value: opt(f[4])?,
                delta: opt(f[5])?,
            })
        })
        .collect()
}

fn config_hash_of(sidecar: &Path) -> Result<String> {
    let text = std::fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
    v["config_hash"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Format(format!("{}: no config_hash", sidecar.display())))
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Table order: base scheme (baseline, IP, SAM, IP+SAM, others), then the
/// averaging variant (none, EMA, SWA, post-hoc EMA).
fn algorithm_order(name: &str) -> (usize, String, usize) {
    let (base, variant) = match name.rsplit_once('+') {
        Some((b, v @ ("EMA" | "SWA" | "PostHocEMA"))) => (b, v),
        _ => (name, ""),
    };
    let b = ["baseline", "IP", "SAM", "IP+SAM"].iter().position(|&x| x == base).unwrap_or(4);
    let v = ["", "EMA", "SWA", "PostHocEMA"].iter().position(|&x| x == variant).unwrap_or(4);
    (b, base.to_string(), v)
}

/// Merges `<run>/reports/sweep.csv` across runs, keyed by
/// (algorithm, respacing, bits). Runs with the same config hash are merged
/// once; missing files are listed and the rest still merged.
pub fn merge_reports(run_dirs: &[PathBuf]) -> MergedReport {
    let mut seen = BTreeSet::new();
    let mut missing = Vec::new();
    let mut cells: BTreeMap<(String, usize, u32), (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for dir in run_dirs {
        let csv = dir.join(files::REPORTS).join("sweep.csv");
        let sidecar = dir.join(files::REPORTS).join("sweep.csv.json");
        let parsed = config_hash_of(&sidecar).and_then(|h| Ok((h, parse_sweep(&csv)?)));
        let (hash, lines) = match parsed {
            Ok(x) => x,
            Err(_) => {
                for p in [csv, sidecar] {
                    if !p.is_file() {
                        missing.push(p);
                    }
                }
                if missing.last().is_none_or(|p| !p.starts_with(dir)) {
                    missing.push(dir.join(files::REPORTS).join("sweep.csv"));
                }
                continue;
            }
        };
        if !seen.insert(hash) {
            continue;
        }
        for l in lines {
            let e = cells.entry((l.variant, l.respacing, l.bits)).or_default();
            e.0.extend(l.value);
            e.1.extend(l.delta);
            e.2 += 1;
        }
    }
    let mut rows: Vec<ReportRow> = cells
        .into_iter()
        .map(|((algorithm, respacing, bits), (vals, deltas, runs))| ReportRow {
            algorithm,
            respacing,
            bits,
            value: median(vals),
            delta_vs_fp32: median(deltas),
            runs,
        })
        .collect();
    rows.sort_by(|a, b| {
        (algorithm_order(&a.algorithm), a.respacing, std::cmp::Reverse(a.bits))
            .cmp(&(algorithm_order(&b.algorithm), b.respacing, std::cmp::Reverse(b.bits)))
    });
    MergedReport {
        rows,
        missing,
        runs: seen.len(),
    }
}

impl MergedReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("algorithm,respacing,bits,value,delta_vs_fp32,runs\n");
        let f = |v: Option<f64>, signed: bool| match (v, signed) {
            (None, _) => String::new(),
            (Some(v), true) => format!("{v:+.6}"),
            (Some(v), false) => format!("{v:.6}"),
        };
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.algorithm,
                r.respacing,
                r.bits,
                f(r.value, false),
                f(r.delta_vs_fp32, true),
                r.runs
            );
        }
        s
    }

    /// One line per (algorithm, respacing): the full-precision distance and
    /// each quantized one as `fp32 → q (+delta ↑)`.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sliced-W2 to target, median over {} run(s)", self.runs);
        let mut groups: Vec<(&str, usize)> = Vec::new();
        for r in &self.rows {
            if !groups.contains(&(r.algorithm.as_str(), r.respacing)) {
                groups.push((&r.algorithm, r.respacing));
            }
        }
        let width = groups.iter().map(|g| g.0.len()).max().unwrap_or(0);
        for (alg, tp) in groups {
            let cells: Vec<&ReportRow> = self
                .rows
                .iter()
                .filter(|r| r.algorithm == alg && r.respacing == tp)
                .collect();
            let fp = cells.iter().find(|r| r.bits >= 32).and_then(|r| r.value);
            let mut line = format!("{alg:<width$}  T'={tp:<5}");
            match fp {
                Some(v) => {
                    let _ = write!(line, " 32-bit {v:.4}");
                }
                None => line.push_str(" 32-bit failed"),
            }
            for r in cells.iter().filter(|r| r.bits < 32) {
                match (fp, r.value, r.delta_vs_fp32) {
                    (Some(a), Some(b), Some(d)) => {
                        let arrow = if d > 0.0 { '↑' } else if d < 0.0 { '↓' } else { '=' };
                        let _ = write!(line, " | {a:.4} → {b:.4} at {}-bit ({d:+.4} {arrow})", r.bits);
                    }
                    (_, Some(b), _) => {
                        let _ = write!(line, " | {b:.4} at {}-bit", r.bits);
                    }
                    _ => {
                        let _ = write!(line, " | failed at {}-bit", r.bits);
                    }
                }
            }
            s.push_str(line.trim_end());
            s.push('\n');
        }
        if !self.missing.is_empty() {
            s.push_str("missing report files:\n");
            for p in &self.missing {
                let _ = writeln!(s, "  {}", p.display());
            }
        }
        s
    }
}

/// Writes `report.csv` and `report.txt` into `out_dir`.
pub fn write_report(report: &MergedReport, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv = out_dir.join("report.csv");
    let txt = out_dir.join("report.txt");
    std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    std::fs::write(&txt, report.summary()).map_err(|e| Error::io(&txt, e))?;
    Ok((csv, txt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(dir: &Path, hash: &str, rows: &[(&str, u32, usize, f64, f64)]) {
        let reports = dir.join(files::REPORTS);
        std::fs::create_dir_all(&reports).unwrap();
        let mut s = String::from("variant,bits,respacing,metric,value,delta_vs_fp32\n");
        for (v, b, t, x, d) in rows {
            s += &format!("{v},{b},{t},sliced-w2,{x:.6},{d:+.6}\n");
        }
        std::fs::write(reports.join("sweep.csv"), s).unwrap();
        std::fs::write(reports.join("sweep.csv.json"), format!("{{\"config_hash\":\"{hash}\"}}")).unwrap();
    }

    #[test]
    fn single_run_and_idempotent_merge() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        let rows = [("SAM", 32, 20, 0.1, 0.0), ("SAM", 8, 20, 0.12, 0.02)];
        run(&a, "h1", &rows);
        run(&b, "h1", &rows);
        let one = merge_reports(&[a.clone()]);
        let two = merge_reports(&[a, b]);
        assert_eq!(one.rows, two.rows);
        assert_eq!(two.rows.len(), 2);
        assert_eq!(two.runs, 1);
        assert!(one.summary().contains("0.1000 → 0.1200 at 8-bit (+0.0200 ↑)"));
    }

    #[test]
    fn medians_across_seeds() {
        let tmp = tempfile::tempdir().unwrap();
        let dirs: Vec<PathBuf> = (0..3).map(|i| tmp.path().join(i.to_string())).collect();
        for (i, d) in dirs.iter().enumerate() {
            run(d, &format!("h{i}"), &[("baseline", 32, 20, [0.3, 0.1, 0.2][i], 0.0)]);
        }
        let m = merge_reports(&dirs);
        assert_eq!(m.rows[0].value, Some(0.2));
        assert_eq!(m.rows[0].runs, 3);
    }

    #[test]
    fn missing_files_listed_partial_table_kept() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a");
        run(&a, "h", &[("SAM", 32, 20, 0.1, 0.0)]);
        let gone = tmp.path().join("gone");
        let m = merge_reports(&[a, gone.clone()]);
        assert_eq!(m.rows.len(), 1);
        assert!(m.missing.iter().any(|p| p.starts_with(&gone)));
        assert!(m.summary().contains("missing report files"));
    }

    #[test]
    fn nine_algorithm_rows_in_table_order() {
        let tmp = tempfile::tempdir().unwrap();
        let mut dirs = Vec::new();
        for (i, base) in ["SAM", "IP", "baseline"].iter().enumerate() {
            let d = tmp.path().join(base);
            let names: Vec<String> = ["final", "ema", "swa"]
                .iter()
                .map(|v| crate::harness::config::variant_name(base, v))
                .collect();
            let rows: Vec<(&str, u32, usize, f64, f64)> =
                names.iter().map(|n| (n.as_str(), 32, 20, 0.1, 0.0)).collect();
            run(&d, &format!("h{i}"), &rows);
            dirs.push(d);
        }
        let m = merge_reports(&dirs);
        let algs: Vec<&str> = m.rows.iter().map(|r| r.algorithm.as_str()).collect();
        assert_eq!(
            algs,
            [
                "baseline", "baseline+EMA", "baseline+SWA", "IP", "IP+EMA", "IP+SWA", "SAM", "SAM+EMA",
                "SAM+SWA"
            ]
        );
    }
}
